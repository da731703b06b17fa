use std::collections::BTreeMap;

use ndarray::{Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{keys, log_sum_exp, DifferentiableScalar, LabeledFeatures, LossError};

/// Row indices of one uniformly chosen sample per distinct label, in
/// ascending label order.
pub fn sample_per_class_indices(labels: &[usize], seed: u64) -> Vec<usize> {
    let mut by_label: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (row, &label) in labels.iter().enumerate() {
        by_label.entry(label).or_default().push(row);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    by_label
        .values()
        .map(|rows| rows[rng.random_range(0..rows.len())])
        .collect()
}

pub fn sample_per_class(lf: &LabeledFeatures, seed: u64) -> LabeledFeatures {
    let rows = sample_per_class_indices(&lf.labels, seed);
    LabeledFeatures {
        features: lf.features.select(Axis(0), &rows),
        labels: rows.iter().map(|&r| lf.labels[r]).collect(),
    }
}

/// Cross-entropy between the row-softmaxed cosine-similarity matrix of the
/// sampled rows and the identity, averaged over rows.
pub fn class_decorrelation_loss(sampled: &LabeledFeatures, temperature: f64) -> Result<DifferentiableScalar, LossError> {
    let s = sampled.len();
    if s < 2 {
        return Err(LossError::InsufficientClasses(s));
    }
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(LossError::Config(format!("temperature must be positive, got {temperature}")));
    }
    let feats = &sampled.features;
    let norms: Vec<f64> = feats.outer_iter().map(|r| r.dot(&r).sqrt()).collect();
    if let Some(i) = norms.iter().position(|n| !(*n > 0.0 && n.is_finite())) {
        return Err(LossError::Domain(format!("sampled row {i} has zero norm")));
    }
    let mut units = feats.clone();
    for (mut row, n) in units.outer_iter_mut().zip(&norms) {
        row /= *n;
    }
    let sim = units.dot(&units.t());

    // g = dL/dsim = (corr - I) / (s * t)
    let mut value = 0.0;
    let mut g = Array2::zeros((s, s));
    for i in 0..s {
        let z = sim.row(i).mapv(|v| v / temperature);
        let lse = log_sum_exp(z.iter().copied());
        value += (lse - z[i]) / s as f64;
        for j in 0..s {
            let corr = (z[j] - lse).exp();
            g[[i, j]] = (corr - if i == j { 1.0 } else { 0.0 }) / (s as f64 * temperature);
        }
    }
    // sim is symmetric in the unit rows: dL/du = (g + g^T) u
    let du = (&g + &g.t()).dot(&units);
    let mut grad = Array2::zeros(feats.raw_dim());
    for (i, n) in norms.iter().enumerate() {
        let u = units.row(i);
        let d = du.row(i);
        let radial = u.dot(&d);
        let mut out = grad.row_mut(i);
        out.assign(&d);
        out.scaled_add(-radial, &u);
        out /= *n;
    }
    DifferentiableScalar::with_grad(value, keys::FEATURES, grad.into_dyn()).ensure_finite("class decorrelation loss")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::{finite_difference_check, Inputs};
    use ndarray::array;
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn sampling_one_row_per_label() {
        let lf = LabeledFeatures::new(array![[1.0], [2.0], [3.0]], vec![0, 0, 1]).unwrap();
        let s = sample_per_class(&lf, 1);
        assert_eq!(s.labels, vec![0, 1]);
        assert_eq!(s.features[[1, 0]], 3.0);

        let same = LabeledFeatures::new(array![[1.0], [2.0], [3.0]], vec![4, 4, 4]).unwrap();
        assert_eq!(sample_per_class(&same, 9).len(), 1);
    }

    #[test]
    fn sampling_is_deterministic_and_ordered() {
        let labels = vec![3, 1, 3, 2, 1, 1, 3, 2];
        let a = sample_per_class_indices(&labels, 77);
        assert_eq!(a, sample_per_class_indices(&labels, 77));
        let picked: Vec<usize> = a.iter().map(|&r| labels[r]).collect();
        assert_eq!(picked, vec![1, 2, 3]);
        // Different seeds eventually pick different rows.
        assert!((0..20).any(|s| sample_per_class_indices(&labels, s) != a));
    }

    #[test]
    fn orthonormal_rows() {
        let lf = LabeledFeatures::new(array![[1.0, 0.0], [0.0, 1.0]], vec![0, 1]).unwrap();
        let l = class_decorrelation_loss(&lf, 1.0).unwrap();
        let e = std::f64::consts::E;
        assert!((l.value - (-(e / (e + 1.0)).ln())).abs() < 1e-12);
        assert!((l.value - 0.313_261_687_518_222_8).abs() < 1e-12);
    }

    #[test]
    fn identical_rows_give_log_two() {
        let lf = LabeledFeatures::new(array![[0.3, 0.4], [0.6, 0.8]], vec![0, 1]).unwrap();
        let l = class_decorrelation_loss(&lf, 1.0).unwrap();
        assert!((l.value - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn errors() {
        let one = LabeledFeatures::new(array![[1.0, 0.0]], vec![0]).unwrap();
        assert_eq!(class_decorrelation_loss(&one, 1.0), Err(LossError::InsufficientClasses(1)));
        let zero = LabeledFeatures::new(array![[1.0, 0.0], [0.0, 0.0]], vec![0, 1]).unwrap();
        assert!(matches!(class_decorrelation_loss(&zero, 1.0), Err(LossError::Domain(_))));
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for &t in &[1.0, 0.5] {
            let f = Array2::from_shape_fn((6, 12), |_| StandardNormal.sample(&mut rng));
            let mut inputs = Inputs::new();
            inputs.insert(keys::FEATURES.into(), f.into_dyn());
            let report = finite_difference_check(
                |inp| {
                    let f = inp[keys::FEATURES].clone().into_dimensionality().unwrap();
                    class_decorrelation_loss(&LabeledFeatures::new(f, (0..6).collect())?, t)
                },
                &inputs,
                1e-5,
            )
            .unwrap();
            assert!(report.max_rel_error <= 1e-4, "t={t}: {report:?}");
        }
    }
}
