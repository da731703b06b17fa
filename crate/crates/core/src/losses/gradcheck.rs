use std::collections::BTreeMap;

use super::{DifferentiableScalar, LossError, Tensor};

pub const DEFAULT_FD_STEP: f64 = 1e-5;

/// Floor on the denominator of the relative error.
const REL_ERROR_FLOOR: f64 = 1e-8;

/// One-sided slopes that disagree by more than this (absolute plus relative)
/// mark a kink inside the probe interval.
const KINK_ABS: f64 = 1e-3;
const KINK_REL: f64 = 1e-2;

pub type Inputs = BTreeMap<String, Tensor>;

#[derive(Debug, Clone, PartialEq, Default)]
pub struct GradCheckReport {
    /// max |analytic - numeric| / max(1e-8, |numeric|) over checked coordinates
    pub max_rel_error: f64,
    /// `(input, flat index)` of the coordinate attaining the maximum
    pub worst: Option<(String, usize)>,
    pub checked: usize,
    /// Coordinates skipped because the loss is not differentiable there.
    pub excluded: Vec<(String, usize)>,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_error <= tolerance
    }
}

/// Compares analytic gradients against central differences, one input
/// coordinate at a time.
///
/// A missing gradient for an input counts as zero. Coordinates where the
/// forward and backward one-sided slopes disagree (a kink, such as an L1 tie)
/// are reported in `excluded` rather than scored.
pub fn finite_difference_check<F>(loss_fn: F, inputs: &Inputs, step: f64) -> Result<GradCheckReport, LossError>
where
    F: Fn(&Inputs) -> Result<DifferentiableScalar, LossError>,
{
    if !(step > 0.0 && step.is_finite()) {
        return Err(LossError::Config(format!("finite-difference step must be positive, got {step}")));
    }
    let base = loss_fn(inputs)?;
    if !base.value.is_finite() {
        return Err(LossError::NonFinite(format!("loss at base point = {}", base.value)));
    }
    let mut report = GradCheckReport::default();
    let mut probe: Inputs = inputs
        .iter()
        .map(|(k, v)| (k.clone(), v.as_standard_layout().into_owned()))
        .collect();
    let eval = |p: &Inputs| -> Result<f64, LossError> {
        let v = loss_fn(p)?.value;
        if v.is_finite() {
            Ok(v)
        } else {
            Err(LossError::NonFinite(format!("loss while probing = {v}")))
        }
    };

    for (name, tensor) in inputs {
        let analytic = base.grad(name);
        if let Some(g) = analytic {
            if g.shape() != tensor.shape() {
                return Err(LossError::Shape(format!(
                    "gradient `{name}` has shape {:?}, input has {:?}",
                    g.shape(),
                    tensor.shape()
                )));
            }
        }
        let analytic_flat: Vec<f64> = match analytic {
            Some(g) => g.iter().copied().collect(),
            None => vec![0.0; tensor.len()],
        };
        let originals: Vec<f64> = tensor.iter().copied().collect();
        for (idx, &original) in originals.iter().enumerate() {
            let set = |p: &mut Inputs, v: f64| {
                p.get_mut(name)
                    .and_then(|t| t.as_slice_mut())
                    .expect("probe tensors are contiguous")[idx] = v;
            };
            set(&mut probe, original + step);
            let plus = eval(&probe)?;
            set(&mut probe, original - step);
            let minus = eval(&probe)?;
            set(&mut probe, original);

            let forward = (plus - base.value) / step;
            let backward = (base.value - minus) / step;
            if (forward - backward).abs() > KINK_ABS + KINK_REL * forward.abs().max(backward.abs()) {
                report.excluded.push((name.clone(), idx));
                continue;
            }
            let numeric = (plus - minus) / (2.0 * step);
            let err = (analytic_flat[idx] - numeric).abs() / numeric.abs().max(REL_ERROR_FLOOR);
            report.checked += 1;
            if report.worst.is_none() || err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = Some((name.clone(), idx));
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::{centerness_loss, keys, Reduction};
    use ndarray::{array, Array1};

    fn vec_input(name: &str, v: Vec<f64>) -> Inputs {
        let mut i = Inputs::new();
        i.insert(name.into(), Array1::from(v).into_dyn());
        i
    }

    #[test]
    fn exact_gradient_passes() {
        let inputs = vec_input("x", vec![0.3, -1.2, 2.0]);
        let report = finite_difference_check(
            |inp| {
                let x = &inp["x"];
                let value = x.iter().map(|v| v * v * v).sum();
                Ok(DifferentiableScalar::with_grad(value, "x", x.mapv(|v| 3.0 * v * v)))
            },
            &inputs,
            DEFAULT_FD_STEP,
        )
        .unwrap();
        assert_eq!(report.checked, 3);
        assert!(report.max_rel_error < 1e-8, "{report:?}");
    }

    #[test]
    fn wrong_gradient_is_caught() {
        let inputs = vec_input("x", vec![0.5, 1.5]);
        let report = finite_difference_check(
            |inp| {
                let x = &inp["x"];
                let value = x.iter().map(|v| v * v).sum();
                Ok(DifferentiableScalar::with_grad(value, "x", x.mapv(|v| 2.2 * v)))
            },
            &inputs,
            DEFAULT_FD_STEP,
        )
        .unwrap();
        assert!((report.max_rel_error - 0.1).abs() < 1e-6);
        assert!(!report.passes(1e-4));
    }

    #[test]
    fn ties_are_excluded_not_failed() {
        let targets = [0.5, 0.2, 0.9];
        let inputs = vec_input(keys::CENTERNESS_LOGITS, vec![0.5, 0.7, 0.1]);
        let report = finite_difference_check(
            |inp| {
                let l: Vec<f64> = inp[keys::CENTERNESS_LOGITS].iter().copied().collect();
                centerness_loss(&l, &targets, Reduction::Mean)
            },
            &inputs,
            DEFAULT_FD_STEP,
        )
        .unwrap();
        assert_eq!(report.excluded, vec![(keys::CENTERNESS_LOGITS.to_string(), 0)]);
        assert_eq!(report.checked, 2);
        assert!(report.max_rel_error <= 1e-4, "{report:?}");
    }

    #[test]
    fn non_finite_probe_fails() {
        let inputs = vec_input("x", vec![0.0]);
        let r = finite_difference_check(
            |inp| {
                let x = inp["x"][[0]];
                let value = if x > 0.0 { f64::INFINITY } else { 0.0 };
                Ok(DifferentiableScalar::with_grad(value, "x", array![0.0].into_dyn()))
            },
            &inputs,
            DEFAULT_FD_STEP,
        );
        assert!(matches!(r, Err(LossError::NonFinite(_))));
    }
}
