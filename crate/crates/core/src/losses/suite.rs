//! Randomized finite-difference sweep over every loss in this module.

use ndarray::{Array1, Array2, ArrayD};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{
    centerness_loss, class_decorrelation_loss, classification_loss, finite_difference_check, keys, object_focus_loss,
    objectness_loss, regression_loss, sample_per_class_indices, semantic_clustering_loss, total_loss, Combiner,
    DifferentiableScalar, Inputs, LabeledFeatures, LossConfig, LossError, LossParts, Reduction, DEFAULT_FD_STEP,
};
use crate::embeddings::synth_embeddings;

pub const SUITE_TOLERANCE: f64 = 1e-4;
/// Looser bound for trials whose logits are scaled into saturation.
pub const SATURATED_TOLERANCE: f64 = 1e-3;
const SATURATION_SCALE: f64 = 8.0;
/// Central differences at the default step drown saturated gradients in
/// cancellation noise; curvature there is tiny, so a wider step stays exact.
const SATURATED_FD_STEP: f64 = 1e-3;
const MAX_DIM: usize = 32;
const MAX_BATCH: usize = 16;
const MAX_CLASSES: usize = 8;

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteResult {
    pub loss: String,
    pub trials: usize,
    /// Largest relative error seen among unsaturated trials.
    pub worst_rel_error: f64,
    /// Largest relative error seen among saturated trials, if any ran.
    pub worst_saturated_rel_error: Option<f64>,
    pub failures: usize,
}

impl SuiteResult {
    fn new(loss: &str) -> Self {
        Self {
            loss: loss.into(),
            trials: 0,
            worst_rel_error: 0.0,
            worst_saturated_rel_error: None,
            failures: 0,
        }
    }

    pub fn passed(&self) -> bool {
        self.failures == 0
    }

    fn record(&mut self, rel: f64, saturated: bool) {
        self.trials += 1;
        let tolerance = if saturated {
            let w = self.worst_saturated_rel_error.get_or_insert(0.0);
            *w = w.max(rel);
            SATURATED_TOLERANCE
        } else {
            self.worst_rel_error = self.worst_rel_error.max(rel);
            SUITE_TOLERANCE
        };
        if !(rel <= tolerance) {
            self.failures += 1;
        }
    }
}

fn gaussian(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> ArrayD<f64> {
    ArrayD::from_shape_fn(shape, |_| {
        let z: f64 = StandardNormal.sample(rng);
        scale * z
    })
}

fn as2(t: &ArrayD<f64>) -> Result<Array2<f64>, LossError> {
    t.clone()
        .into_dimensionality()
        .map_err(|e| LossError::Shape(e.to_string()))
}

fn as_vec(t: &ArrayD<f64>) -> Vec<f64> {
    t.iter().copied().collect()
}

fn run<F>(result: &mut SuiteResult, f: F, inputs: &Inputs, saturated: bool) -> Result<(), LossError>
where
    F: Fn(&Inputs) -> Result<DifferentiableScalar, LossError>,
{
    let step = if saturated { SATURATED_FD_STEP } else { DEFAULT_FD_STEP };
    let report = finite_difference_check(f, inputs, step)?;
    result.record(report.max_rel_error, saturated);
    Ok(())
}

/// Centerness targets kept away from their logits so no coordinate sits on
/// the L1 kink.
fn centerness_pair(rng: &mut ChaCha8Rng, n: usize) -> (ArrayD<f64>, Vec<f64>) {
    let mut logits = Vec::with_capacity(n);
    let mut targets = Vec::with_capacity(n);
    while logits.len() < n {
        let (l, t): (f64, f64) = (rng.random_range(-0.5..1.5), rng.random_range(0.0..1.0));
        if (l - t).abs() > 1e-3 {
            logits.push(l);
            targets.push(t);
        }
    }
    (Array1::from(logits).into_dyn(), targets)
}

/// Runs `trials` random inputs through every loss (each object-focus
/// combiner separately) and scores analytic gradients against central
/// differences. Every fifth trial scales logits into saturation and is held
/// to [`SATURATED_TOLERANCE`] instead of [`SUITE_TOLERANCE`].
pub fn gradient_suite(seed: u64, trials: usize) -> Result<Vec<SuiteResult>, LossError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sc = SuiteResult::new("semantic_clustering");
    let mut cd = SuiteResult::new("class_decorrelation");
    let mut ctr = SuiteResult::new("centerness");
    let mut obj = SuiteResult::new("objectness");
    let mut focus: Vec<SuiteResult> = Combiner::ALL
        .iter()
        .map(|c| SuiteResult::new(&format!("object_focus/{}", c.name())))
        .collect();
    let mut ce = SuiteResult::new("classification");
    let mut reg = SuiteResult::new("regression");
    let mut total = SuiteResult::new("total");

    for trial in 0..trials {
        let saturated = trial % 5 == 4;
        let logit_scale = if saturated { SATURATION_SCALE } else { 1.0 };
        let m = rng.random_range(2..=MAX_BATCH);
        let d = rng.random_range(2..=MAX_DIM);
        let k = rng.random_range(2..=MAX_CLASSES.min(d));
        let labels: Vec<usize> = (0..m).map(|_| rng.random_range(0..k)).collect();
        let names: Vec<String> = (0..k).map(|i| format!("c{i}")).collect();
        let table = synth_embeddings(&names, d, rng.random(), &[])
            .map_err(|e| LossError::Domain(e.to_string()))?;

        // Cosine logits are bounded, so these two never saturate.
        let mut inputs = Inputs::new();
        inputs.insert(keys::FEATURES.into(), gaussian(&mut rng, &[m, d], 1.0));
        run(
            &mut sc,
            |i| semantic_clustering_loss(&LabeledFeatures::new(as2(&i[keys::FEATURES])?, labels.clone())?, &table, Reduction::Mean),
            &inputs,
            false,
        )?;

        let s = rng.random_range(2..=MAX_CLASSES.min(d));
        let mut inputs = Inputs::new();
        inputs.insert(keys::FEATURES.into(), gaussian(&mut rng, &[s, d], 1.0));
        run(
            &mut cd,
            |i| class_decorrelation_loss(&LabeledFeatures::new(as2(&i[keys::FEATURES])?, (0..s).collect())?, 1.0),
            &inputs,
            false,
        )?;

        let (ctr_logits, ctr_targets) = centerness_pair(&mut rng, m);
        let mut inputs = Inputs::new();
        inputs.insert(keys::CENTERNESS_LOGITS.into(), ctr_logits.clone());
        run(
            &mut ctr,
            |i| centerness_loss(&as_vec(&i[keys::CENTERNESS_LOGITS]), &ctr_targets, Reduction::Mean),
            &inputs,
            false,
        )?;

        let is_object: Vec<bool> = (0..m).map(|_| rng.random_bool(0.5)).collect();
        let obj_logits = gaussian(&mut rng, &[m], 2.0f64.max(logit_scale));
        let mut inputs = Inputs::new();
        inputs.insert(keys::OBJECTNESS_LOGITS.into(), obj_logits.clone());
        run(
            &mut obj,
            |i| objectness_loss(&as_vec(&i[keys::OBJECTNESS_LOGITS]), &is_object, Reduction::Mean),
            &inputs,
            saturated,
        )?;

        let mut inputs = Inputs::new();
        inputs.insert(keys::CENTERNESS_LOGITS.into(), ctr_logits.clone());
        inputs.insert(keys::OBJECTNESS_LOGITS.into(), obj_logits.clone());
        for (result, combiner) in focus.iter_mut().zip(Combiner::ALL) {
            run(
                result,
                |i| {
                    let lc = centerness_loss(&as_vec(&i[keys::CENTERNESS_LOGITS]), &ctr_targets, Reduction::Mean)?;
                    let lo = objectness_loss(&as_vec(&i[keys::OBJECTNESS_LOGITS]), &is_object, Reduction::Mean)?;
                    object_focus_loss(&lc, &lo, combiner, LossConfig::default().gm_eps)
                },
                &inputs,
                saturated,
            )?;
        }

        // Label k is background.
        let ce_labels: Vec<usize> = (0..m).map(|_| rng.random_range(0..=k)).collect();
        let class_logits = gaussian(&mut rng, &[m, k + 1], logit_scale);
        let mut inputs = Inputs::new();
        inputs.insert(keys::CLASS_LOGITS.into(), class_logits.clone());
        run(
            &mut ce,
            |i| classification_loss(as2(&i[keys::CLASS_LOGITS])?.view(), &ce_labels),
            &inputs,
            saturated,
        )?;

        // Keep every residual off the smooth-L1 knot at |x| = 1.
        let target = gaussian(&mut rng, &[m, 4], 1.0);
        let mut pred = gaussian(&mut rng, &[m, 4], 1.0);
        pred.zip_mut_with(&target, |p, t| {
            if ((*p - t).abs() - 1.0).abs() < 1e-3 {
                *p += 0.01;
            }
        });
        let target2 = as2(&target)?;
        let mut inputs = Inputs::new();
        inputs.insert(keys::REG_DELTAS.into(), pred.clone());
        run(
            &mut reg,
            |i| regression_loss(as2(&i[keys::REG_DELTAS])?.view(), target2.view()),
            &inputs,
            false,
        )?;

        let cfg = LossConfig {
            alpha1: 0.5,
            alpha2: 0.5,
            ..LossConfig::default()
        };
        let sampled = sample_per_class_indices(&labels, rng.random());
        let mut inputs = Inputs::new();
        inputs.insert(keys::FEATURES.into(), gaussian(&mut rng, &[m, d], 1.0));
        inputs.insert(keys::CLASS_LOGITS.into(), class_logits);
        inputs.insert(keys::REG_DELTAS.into(), pred);
        inputs.insert(keys::OBJECTNESS_LOGITS.into(), obj_logits);
        inputs.insert(keys::CENTERNESS_LOGITS.into(), ctr_logits);
        run(
            &mut total,
            |i| {
                let features = as2(&i[keys::FEATURES])?;
                let lc = centerness_loss(&as_vec(&i[keys::CENTERNESS_LOGITS]), &ctr_targets, Reduction::Mean)?;
                let lo = objectness_loss(&as_vec(&i[keys::OBJECTNESS_LOGITS]), &is_object, Reduction::Mean)?;
                let mut parts = LossParts {
                    object_focus: object_focus_loss(&lc, &lo, cfg.combiner, cfg.gm_eps)?,
                    semantic_clustering: semantic_clustering_loss(
                        &LabeledFeatures::new(features.clone(), labels.clone())?,
                        &table,
                        cfg.reduction,
                    )?,
                    regression: regression_loss(as2(&i[keys::REG_DELTAS])?.view(), target2.view())?,
                    classification: classification_loss(as2(&i[keys::CLASS_LOGITS])?.view(), &ce_labels)?,
                    ..LossParts::default()
                };
                if sampled.len() >= 2 {
                    let rows = features.select(ndarray::Axis(0), &sampled);
                    let lf = LabeledFeatures::new(rows, sampled.iter().map(|&r| labels[r]).collect())?;
                    parts.class_decorrelation = class_decorrelation_loss(&lf, cfg.decorrelation_temperature)?
                        .scatter_rows(keys::FEATURES, &sampled, m)?;
                }
                total_loss(&parts, None, &cfg)
            },
            &inputs,
            saturated,
        )?;
    }

    let mut out = vec![sc, cd, ctr, obj];
    out.extend(focus);
    out.extend([ce, reg, total]);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_loss_passes() {
        let results = gradient_suite(3, 10).unwrap();
        assert_eq!(results.len(), 12);
        for r in &results {
            assert_eq!(r.trials, 10);
            assert!(r.passed(), "{r:?}");
        }
    }

    #[test]
    fn deterministic() {
        assert_eq!(gradient_suite(9, 3).unwrap(), gradient_suite(9, 3).unwrap());
    }
}
