use super::{Detection, Label, MetricsError};

/// Shannon entropy in nats, with `0 ln 0 = 0`.
pub fn shannon_entropy(probs: &[f64]) -> f64 {
    -probs.iter().filter(|&&p| p > 0.0).map(|&p| p * p.ln()).sum::<f64>()
}

/// Relabels every detection whose class distribution has entropy above
/// `threshold` as [`Label::Unknown`]; scores are kept.
pub fn entropy_threshold(dets: &[Detection], threshold: f64) -> Result<Vec<Detection>, MetricsError> {
    dets.iter()
        .enumerate()
        .map(|(index, d)| {
            let probs = d.class_probs.as_ref().ok_or(MetricsError::MissingProbabilities { index })?;
            let mut out = d.clone();
            if shannon_entropy(probs) > threshold {
                out.label = Label::Unknown;
            }
            Ok(out)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::test_util::*;
    use proptest::prelude::*;

    fn with_probs(p: Vec<f64>) -> Detection {
        let mut d = det("img", bx(0.0, 0.0, 1.0, 1.0), Label::Known(0), 0.5);
        d.class_probs = Some(p);
        d
    }

    #[test]
    fn one_hot_keeps_label() {
        let out = entropy_threshold(&[with_probs(vec![1.0, 0.0, 0.0])], 0.85).unwrap();
        assert_eq!(out[0].label, Label::Known(0));
        assert_eq!(shannon_entropy(&[1.0, 0.0, 0.0]), 0.0);
    }

    #[test]
    fn uniform_becomes_unknown() {
        let p = vec![1.0 / 3.0; 3];
        assert!((shannon_entropy(&p) - 3f64.ln()).abs() < 1e-12);
        let out = entropy_threshold(&[with_probs(p)], 0.85).unwrap();
        assert_eq!(out[0].label, Label::Unknown);
        assert_eq!(out[0].score, 0.5);
    }

    #[test]
    fn infinite_threshold_is_identity() {
        let dets = vec![with_probs(vec![0.5, 0.5]), with_probs(vec![0.2, 0.3, 0.5])];
        assert_eq!(entropy_threshold(&dets, f64::INFINITY).unwrap(), dets);
    }

    #[test]
    fn missing_probs_is_an_error() {
        let d = det("img", bx(0.0, 0.0, 1.0, 1.0), Label::Known(0), 0.5);
        assert_eq!(
            entropy_threshold(&[d], 0.85),
            Err(MetricsError::MissingProbabilities { index: 0 })
        );
    }

    proptest! {
        #[test]
        fn threshold_at_max_entropy_is_identity(raw in prop::collection::vec(0.0..1.0f64, 2..8)) {
            let total: f64 = raw.iter().sum();
            prop_assume!(total > 1e-3);
            let p: Vec<f64> = raw.iter().map(|v| v / total).collect();
            let max_entropy = (p.len() as f64).ln();
            let dets = vec![with_probs(p)];
            prop_assert_eq!(entropy_threshold(&dets, max_entropy + 1e-12).unwrap(), dets);
        }
    }
}
