use ndarray::{Array2, ArrayView2};

use super::{keys, log_sum_exp, DifferentiableScalar, LossError};

/// Mean softmax cross-entropy over `k + 1` slots (known classes plus the
/// background/unknown slot).
pub fn classification_loss(class_logits: ArrayView2<'_, f64>, labels: &[usize]) -> Result<DifferentiableScalar, LossError> {
    let (m, slots) = class_logits.dim();
    if m == 0 {
        return Err(LossError::Shape("classification loss needs at least one row".into()));
    }
    if labels.len() != m {
        return Err(LossError::Shape(format!("{m} logit rows vs {} labels", labels.len())));
    }
    let scale = 1.0 / m as f64;
    let mut value = 0.0;
    let mut grad = Array2::zeros((m, slots));
    for (i, (row, &label)) in class_logits.outer_iter().zip(labels).enumerate() {
        if label >= slots {
            return Err(LossError::Domain(format!("label {label} out of range for {slots} slots")));
        }
        let lse = log_sum_exp(row.iter().copied());
        value += scale * (lse - row[label]);
        for j in 0..slots {
            grad[[i, j]] = scale * ((row[j] - lse).exp() - if j == label { 1.0 } else { 0.0 });
        }
    }
    DifferentiableScalar::with_grad(value, keys::CLASS_LOGITS, grad.into_dyn()).ensure_finite("classification loss")
}

/// Smooth-L1 with transition point 1: returns `(value, derivative)`.
pub fn smooth_l1(diff: f64) -> (f64, f64) {
    if diff.abs() < 1.0 {
        (0.5 * diff * diff, diff)
    } else {
        (diff.abs() - 0.5, diff.signum())
    }
}

/// Mean smooth-L1 over all `4n` delta entries. An empty batch is zero.
pub fn regression_loss(pred: ArrayView2<'_, f64>, target: ArrayView2<'_, f64>) -> Result<DifferentiableScalar, LossError> {
    if pred.dim() != target.dim() {
        return Err(LossError::Shape(format!("predictions {:?} vs targets {:?}", pred.dim(), target.dim())));
    }
    if pred.is_empty() {
        return Ok(DifferentiableScalar::with_grad(
            0.0,
            keys::REG_DELTAS,
            Array2::<f64>::zeros(pred.raw_dim()).into_dyn(),
        ));
    }
    let scale = 1.0 / pred.len() as f64;
    let mut value = 0.0;
    let mut grad = Array2::zeros(pred.raw_dim());
    ndarray::Zip::from(&mut grad).and(&pred).and(&target).for_each(|g, &p, &t| {
        let (v, d) = smooth_l1(p - t);
        value += scale * v;
        *g = scale * d;
    });
    DifferentiableScalar::with_grad(value, keys::REG_DELTAS, grad.into_dyn()).ensure_finite("regression loss")
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array2};

    #[test]
    fn classification_examples() {
        let uniform = Array2::zeros((2, 3));
        let l = classification_loss(uniform.view(), &[0, 2]).unwrap();
        assert!((l.value - 3f64.ln()).abs() < 1e-12);

        let confident = array![[20.0, 0.0, 0.0], [0.0, 0.0, 20.0]];
        let l = classification_loss(confident.view(), &[0, 2]).unwrap();
        assert!(l.value < 1e-8);

        assert!(matches!(
            classification_loss(confident.view(), &[0, 3]),
            Err(LossError::Domain(_))
        ));
        assert!(classification_loss(confident.view(), &[0]).is_err());
    }

    #[test]
    fn regression_examples() {
        let t = array![[0.1, 0.2, 0.3, 0.4], [1.0, -1.0, 0.0, 2.0]];
        assert_eq!(regression_loss(t.view(), t.view()).unwrap().value, 0.0);
        let half = &t + 0.5;
        assert!((regression_loss(half.view(), t.view()).unwrap().value - 0.125).abs() < 1e-15);
        let two = &t - 2.0;
        assert!((regression_loss(two.view(), t.view()).unwrap().value - 1.5).abs() < 1e-15);
        let empty = Array2::<f64>::zeros((0, 4));
        assert_eq!(regression_loss(empty.view(), empty.view()).unwrap().value, 0.0);
        assert!(regression_loss(t.view(), empty.view()).is_err());
    }
}
