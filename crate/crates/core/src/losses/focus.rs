use ndarray::Array1;

use super::{keys, Combiner, DifferentiableScalar, LossError, Reduction};

/// L1 distance between centerness predictions and targets.
///
/// Filtered proposals are expected to be removed by the caller; an empty
/// batch yields zero with an empty gradient.
pub fn centerness_loss(logits: &[f64], targets: &[f64], reduction: Reduction) -> Result<DifferentiableScalar, LossError> {
    if logits.len() != targets.len() {
        return Err(LossError::Shape(format!(
            "{} centerness logits vs {} targets",
            logits.len(),
            targets.len()
        )));
    }
    let n = logits.len();
    if n == 0 {
        return Ok(DifferentiableScalar::with_grad(
            0.0,
            keys::CENTERNESS_LOGITS,
            Array1::<f64>::zeros(0).into_dyn(),
        ));
    }
    let scale = reduction.factor(n);
    let mut value = 0.0;
    let grad: Array1<f64> = logits
        .iter()
        .zip(targets)
        .map(|(&l, &t)| {
            let diff = l - t;
            value += scale * diff.abs();
            // sign with a zero subgradient at ties
            if diff > 0.0 {
                scale
            } else if diff < 0.0 {
                -scale
            } else {
                0.0
            }
        })
        .collect();
    DifferentiableScalar::with_grad(value, keys::CENTERNESS_LOGITS, grad.into_dyn()).ensure_finite("centerness loss")
}

/// Binary cross-entropy of `sigmoid(logit)` against the object flag, in the
/// overflow-free form `max(x, 0) - x*y + ln(1 + exp(-|x|))`.
pub fn objectness_loss(logits: &[f64], is_object: &[bool], reduction: Reduction) -> Result<DifferentiableScalar, LossError> {
    if logits.len() != is_object.len() {
        return Err(LossError::Shape(format!(
            "{} objectness logits vs {} targets",
            logits.len(),
            is_object.len()
        )));
    }
    let n = logits.len();
    if n == 0 {
        return Err(LossError::Shape("objectness loss needs at least one proposal".into()));
    }
    let scale = reduction.factor(n);
    let mut value = 0.0;
    let grad: Array1<f64> = logits
        .iter()
        .zip(is_object)
        .map(|(&x, &obj)| {
            let y = if obj { 1.0 } else { 0.0 };
            value += scale * (x.max(0.0) - x * y + (-x.abs()).exp().ln_1p());
            scale * (sigmoid(x) - y)
        })
        .collect();
    DifferentiableScalar::with_grad(value, keys::OBJECTNESS_LOGITS, grad.into_dyn()).ensure_finite("objectness loss")
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Merges the centerness loss `lc` and objectness loss `lobj`.
///
/// The geometric mean is `sqrt((lc + gm_eps) * (lobj + gm_eps))`; `gm_eps`
/// keeps its partial derivatives finite when either loss reaches zero.
pub fn object_focus_loss(
    lc: &DifferentiableScalar,
    lobj: &DifferentiableScalar,
    combiner: Combiner,
    gm_eps: f64,
) -> Result<DifferentiableScalar, LossError> {
    let (c, o) = (lc.value, lobj.value);
    if !(c >= 0.0 && o >= 0.0) {
        return Err(LossError::Domain(format!(
            "object focus constituents must be non-negative (centerness {c}, objectness {o})"
        )));
    }
    if !(gm_eps > 0.0) {
        return Err(LossError::Config(format!("gm_eps must be positive, got {gm_eps}")));
    }
    let (value, dc, dobj) = match combiner {
        Combiner::GeometricMean => {
            let (a, b) = (c + gm_eps, o + gm_eps);
            let v = (a * b).sqrt();
            (v, 0.5 * (b / a).sqrt(), 0.5 * (a / b).sqrt())
        }
        Combiner::Sum => (c + o, 1.0, 1.0),
        Combiner::Product => (c * o, o, c),
        Combiner::ObjectnessOnly => (o, 0.0, 1.0),
        Combiner::CenternessOnly => (c, 1.0, 0.0),
    };
    let mut out = DifferentiableScalar::zero();
    out.add_scaled(lc, dc)?;
    out.add_scaled(lobj, dobj)?;
    out.value = value;
    out.ensure_finite("object focus loss")
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn scalar(v: f64, key: &str) -> DifferentiableScalar {
        DifferentiableScalar::with_grad(v, key, array![1.0].into_dyn())
    }

    #[test]
    fn centerness_examples() {
        let l = centerness_loss(&[0.2, 0.7], &[0.2, 0.7], Reduction::Mean).unwrap();
        assert_eq!(l.value, 0.0);
        assert_eq!(l.grad(keys::CENTERNESS_LOGITS).unwrap(), &array![0.0, 0.0].into_dyn());

        let l = centerness_loss(&[0.5], &[1.0], Reduction::Mean).unwrap();
        assert_eq!(l.value, 0.5);

        let l = centerness_loss(&[0.0, 1.0], &[1.0, 0.0], Reduction::Mean).unwrap();
        assert_eq!(l.value, 1.0);
        assert_eq!(l.grad(keys::CENTERNESS_LOGITS).unwrap(), &array![-0.5, 0.5].into_dyn());

        let l = centerness_loss(&[0.0, 1.0], &[1.0, 0.0], Reduction::Sum).unwrap();
        assert_eq!(l.value, 2.0);
    }

    #[test]
    fn centerness_empty_and_mismatch() {
        let l = centerness_loss(&[], &[], Reduction::Mean).unwrap();
        assert_eq!(l.value, 0.0);
        assert_eq!(l.grad(keys::CENTERNESS_LOGITS).unwrap().len(), 0);
        assert!(centerness_loss(&[1.0], &[], Reduction::Mean).is_err());
    }

    #[test]
    fn objectness_examples() {
        let l = objectness_loss(&[0.0], &[true], Reduction::Mean).unwrap();
        assert!((l.value - 2f64.ln()).abs() < 1e-15);
        let l = objectness_loss(&[20.0], &[true], Reduction::Mean).unwrap();
        assert!(l.value <= 1e-8);
        let l = objectness_loss(&[-20.0], &[false], Reduction::Mean).unwrap();
        assert!(l.value <= 1e-8);
        // Large logits must not overflow.
        let l = objectness_loss(&[-800.0, 800.0], &[true, false], Reduction::Mean).unwrap();
        assert!((l.value - 800.0).abs() < 1e-9);
        assert!(objectness_loss(&[], &[], Reduction::Mean).is_err());
    }

    #[test]
    fn focus_combiners() {
        let lc = scalar(1.0, "c");
        let lo = scalar(4.0, "o");
        let gm = object_focus_loss(&lc, &lo, Combiner::GeometricMean, 1e-12).unwrap();
        assert!((gm.value - 2.0).abs() < 1e-6);
        // d/dlc = 0.5 * sqrt(4 / 1), d/dlo = 0.5 * sqrt(1 / 4)
        assert!((gm.grad("c").unwrap()[[0]] - 1.0).abs() < 1e-9);
        assert!((gm.grad("o").unwrap()[[0]] - 0.25).abs() < 1e-9);

        assert_eq!(object_focus_loss(&lc, &lo, Combiner::Sum, 1e-12).unwrap().value, 5.0);
        assert_eq!(object_focus_loss(&lc, &lo, Combiner::Product, 1e-12).unwrap().value, 4.0);
        assert_eq!(object_focus_loss(&lc, &lo, Combiner::ObjectnessOnly, 1e-12).unwrap().value, 4.0);
        assert_eq!(object_focus_loss(&lc, &lo, Combiner::CenternessOnly, 1e-12).unwrap().value, 1.0);
    }

    #[test]
    fn geometric_mean_annihilated_by_zero() {
        let eps = 1e-12;
        for x in [0.0, 0.3, 7.0] {
            let v = object_focus_loss(&scalar(0.0, "c"), &scalar(x, "o"), Combiner::GeometricMean, eps)
                .unwrap()
                .value;
            assert!(v <= (eps * (x + eps)).sqrt() * (1.0 + 1e-12));
        }
        let g = object_focus_loss(&scalar(0.0, "c"), &scalar(0.0, "o"), Combiner::GeometricMean, eps).unwrap();
        assert!(g.is_finite());
    }

    #[test]
    fn negative_constituent_rejected() {
        let r = object_focus_loss(&scalar(-0.1, "c"), &scalar(1.0, "o"), Combiner::Sum, 1e-12);
        assert!(matches!(r, Err(LossError::Domain(_))));
    }
}
