use ndarray::ArrayView2;

use super::{DifferentiableScalar, LossConfig, LossError};

/// Constituents of the full training objective. Missing terms stay zero.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LossParts {
    pub object_focus: DifferentiableScalar,
    pub rpn_regression: DifferentiableScalar,
    pub semantic_clustering: DifferentiableScalar,
    pub class_decorrelation: DifferentiableScalar,
    pub regression: DifferentiableScalar,
    pub classification: DifferentiableScalar,
}

/// Plug-in slot for an unknown-probability term over the class head.
pub trait UnknownProbabilityLoss: Send + Sync {
    fn evaluate(&self, class_logits: ArrayView2<'_, f64>, labels: &[usize]) -> Result<DifferentiableScalar, LossError>;
}

/// The default plug-in: contributes nothing.
#[derive(Debug, Clone, Copy, Default)]
pub struct NoUnknownProbabilityLoss;

impl UnknownProbabilityLoss for NoUnknownProbabilityLoss {
    fn evaluate(&self, _: ArrayView2<'_, f64>, _: &[usize]) -> Result<DifferentiableScalar, LossError> {
        Ok(DifferentiableScalar::zero())
    }
}

/// `α3·L_focus + L_rpn_reg + α1·L_sc + α2·L_cd + L_upl + L_reg + L_ce`
pub fn total_loss(
    parts: &LossParts,
    upl: Option<&DifferentiableScalar>,
    cfg: &LossConfig,
) -> Result<DifferentiableScalar, LossError> {
    cfg.validate()?;
    let terms: [(&str, &DifferentiableScalar, f64); 6] = [
        ("object focus", &parts.object_focus, cfg.alpha3),
        ("rpn regression", &parts.rpn_regression, 1.0),
        ("semantic clustering", &parts.semantic_clustering, cfg.alpha1),
        ("class decorrelation", &parts.class_decorrelation, cfg.alpha2),
        ("regression", &parts.regression, 1.0),
        ("classification", &parts.classification, 1.0),
    ];
    let mut out = DifferentiableScalar::zero();
    for (name, term, weight) in terms {
        if !term.value.is_finite() {
            return Err(LossError::NonFinite(format!("{name} = {}", term.value)));
        }
        out.add_scaled(term, weight)?;
    }
    if let Some(u) = upl {
        if !u.value.is_finite() {
            return Err(LossError::NonFinite(format!("unknown probability = {}", u.value)));
        }
        out.add_scaled(u, 1.0)?;
    }
    out.ensure_finite("total loss")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::keys;
    use ndarray::{array, Array2};

    #[test]
    fn all_zero_parts() {
        let t = total_loss(&LossParts::default(), None, &LossConfig::default()).unwrap();
        assert_eq!(t.value, 0.0);
        assert!(t.grads.is_empty());

        let parts = LossParts {
            classification: DifferentiableScalar::with_grad(0.0, keys::CLASS_LOGITS, Array2::zeros((2, 3)).into_dyn()),
            ..LossParts::default()
        };
        let t = total_loss(&parts, None, &LossConfig::default()).unwrap();
        assert!(t.grad(keys::CLASS_LOGITS).unwrap().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn single_weighted_term() {
        let parts = LossParts {
            semantic_clustering: DifferentiableScalar::with_grad(2.0, keys::FEATURES, array![[1.0, -2.0]].into_dyn()),
            ..LossParts::default()
        };
        let t = total_loss(&parts, None, &LossConfig::default()).unwrap();
        assert!((t.value - 0.1).abs() < 1e-15);
        assert_eq!(t.grad(keys::FEATURES).unwrap(), &array![[0.05, -0.1]].into_dyn());
    }

    #[test]
    fn shared_keys_accumulate() {
        let parts = LossParts {
            semantic_clustering: DifferentiableScalar::with_grad(1.0, keys::FEATURES, array![[1.0]].into_dyn()),
            class_decorrelation: DifferentiableScalar::with_grad(1.0, keys::FEATURES, array![[2.0]].into_dyn()),
            ..LossParts::default()
        };
        let cfg = LossConfig { alpha1: 0.5, alpha2: 0.25, ..LossConfig::default() };
        let t = total_loss(&parts, None, &cfg).unwrap();
        assert_eq!(t.value, 0.75);
        assert_eq!(t.grad(keys::FEATURES).unwrap(), &array![[1.0]].into_dyn());
    }

    #[test]
    fn upl_plug_in_defaults_to_zero() {
        let logits = Array2::zeros((2, 3));
        let u = NoUnknownProbabilityLoss.evaluate(logits.view(), &[0, 1]).unwrap();
        assert_eq!(u, DifferentiableScalar::zero());
        let parts = LossParts {
            classification: DifferentiableScalar { value: 1.5, ..Default::default() },
            ..LossParts::default()
        };
        let with = total_loss(&parts, Some(&u), &LossConfig::default()).unwrap();
        let without = total_loss(&parts, None, &LossConfig::default()).unwrap();
        assert_eq!(with, without);
    }

    #[test]
    fn non_finite_part_rejected() {
        let parts = LossParts {
            regression: DifferentiableScalar { value: f64::NAN, ..Default::default() },
            ..LossParts::default()
        };
        assert!(matches!(
            total_loss(&parts, None, &LossConfig::default()),
            Err(LossError::NonFinite(_))
        ));
    }
}
