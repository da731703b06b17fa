use std::thread;

use super::dataset::{generate_dataset, Dataset, DatasetSpec};
use super::train::{predict_all, train_on, ModuleSwitches, TrainConfig, TrainOutcome};
use super::HarnessError;
use crate::metrics::{evaluate, Detection, EvalOptions, EvalReport};

#[derive(Debug, Clone, PartialEq)]
pub struct CaseResult {
    pub outcome: TrainOutcome,
    /// Raw predictions on the test split, before any entropy relabeling.
    pub detections: Vec<Detection>,
    pub report: EvalReport,
}

/// Trains with `cfg`, predicts on the test split, evaluates with `eval`
/// (which applies its own entropy threshold, if any).
pub fn run_case(data: &Dataset, cfg: &TrainConfig, eval: &EvalOptions) -> Result<CaseResult, HarnessError> {
    let outcome = train_on(data, cfg)?;
    let detections = predict_all(&outcome.model, &data.test, None)?;
    let report = evaluate(&detections, &data.test_ground_truth(), &data.known_classes, eval)?;
    Ok(CaseResult {
        outcome,
        detections,
        report,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub switches: ModuleSwitches,
    pub report: EvalReport,
    pub initial_loss: f64,
    pub final_loss: f64,
}

/// Every [`ModuleSwitches::GRID`] case on one shared dataset with shared
/// seeds, in grid order. Cases run on separate threads; each owns its model
/// and generators, so the result does not depend on scheduling.
pub fn ablate_on(data: &Dataset, base: &TrainConfig, eval: &EvalOptions) -> Result<Vec<AblationRow>, HarnessError> {
    let results: Vec<Result<AblationRow, HarnessError>> = thread::scope(|s| {
        let handles: Vec<_> = ModuleSwitches::GRID
            .iter()
            .map(|&switches| {
                let cfg = TrainConfig {
                    switches,
                    ..base.clone()
                };
                s.spawn(move || {
                    let case = run_case(data, &cfg, eval)?;
                    let history = &case.outcome.loss_history;
                    Ok(AblationRow {
                        switches,
                        report: case.report,
                        initial_loss: history[0],
                        final_loss: history[history.len() - 1],
                    })
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("ablation case panicked"))
            .collect()
    });
    results.into_iter().collect()
}

pub fn ablate(spec: &DatasetSpec, base: &TrainConfig, eval: &EvalOptions) -> Result<Vec<AblationRow>, HarnessError> {
    ablate_on(&generate_dataset(spec)?, base, eval)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_has_eight_rows_in_order() {
        let spec = DatasetSpec {
            images_train: 10,
            images_test: 6,
            ..DatasetSpec::default()
        };
        let cfg = TrainConfig {
            iterations: 30,
            ..TrainConfig::default()
        };
        let rows = ablate(&spec, &cfg, &EvalOptions::default()).unwrap();
        assert_eq!(rows.len(), 8);
        let order: Vec<_> = rows.iter().map(|r| r.switches).collect();
        assert_eq!(order, ModuleSwitches::GRID);
        let baseline = rows.iter().find(|r| r.switches == ModuleSwitches::ALL_OFF).unwrap();
        assert_eq!(baseline.report.ap_u, 0.0);
        assert_eq!(rows, ablate(&spec, &cfg, &EvalOptions::default()).unwrap());
    }
}
