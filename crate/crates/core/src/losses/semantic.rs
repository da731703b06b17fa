use ndarray::Array2;

use super::{keys, log_sum_exp, DifferentiableScalar, LabeledFeatures, LossError, Reduction};
use crate::embeddings::ClassEmbeddingTable;

/// Cross-entropy over cosine similarities between each feature row and every
/// class embedding. Embeddings are constants; the gradient is taken with
/// respect to the features only.
pub fn semantic_clustering_loss(
    lf: &LabeledFeatures,
    table: &ClassEmbeddingTable,
    reduction: Reduction,
) -> Result<DifferentiableScalar, LossError> {
    let k = table.len();
    if k < 2 {
        return Err(LossError::Domain(format!("semantic clustering needs k >= 2 classes, got {k}")));
    }
    if lf.dim() != table.dim() {
        return Err(LossError::Shape(format!(
            "feature dim {} != embedding dim {}",
            lf.dim(),
            table.dim()
        )));
    }
    let embeddings = table.matrix();
    let scale = reduction.factor(lf.len());
    let mut value = 0.0;
    let mut grad = Array2::zeros(lf.features.raw_dim());

    for (i, (row, &label)) in lf.features.outer_iter().zip(&lf.labels).enumerate() {
        if label >= k {
            return Err(LossError::Domain(format!("label {label} out of range for {k} classes")));
        }
        let norm = row.dot(&row).sqrt();
        if !(norm > 0.0 && norm.is_finite()) {
            return Err(LossError::Domain(format!("feature row {i} has zero norm")));
        }
        let unit = &row / norm;
        let logits = embeddings.dot(&unit);
        let lse = log_sum_exp(logits.iter().copied());
        value += scale * (lse - logits[label]);

        // d logit_j / d f = (T_j - logit_j * u) / |f|
        let mut g_row = grad.row_mut(i);
        for j in 0..k {
            let p = (logits[j] - lse).exp();
            let coeff = scale * (p - if j == label { 1.0 } else { 0.0 }) / norm;
            g_row.scaled_add(coeff, &embeddings.row(j));
            g_row.scaled_add(-coeff * logits[j], &unit);
        }
    }
    DifferentiableScalar::with_grad(value, keys::FEATURES, grad.into_dyn()).ensure_finite("semantic clustering loss")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embeddings::synth_embeddings;
    use crate::losses::{finite_difference_check, Inputs};
    use ndarray::{array, Array2};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn axis_table(k: usize, dim: usize) -> ClassEmbeddingTable {
        let entries = (0..k)
            .map(|i| {
                let mut v = vec![0.0; dim];
                v[i] = 1.0;
                (format!("c{i}"), v)
            })
            .collect();
        ClassEmbeddingTable::new(entries).unwrap()
    }

    #[test]
    fn aligned_features_on_orthogonal_embeddings() {
        // logits (1, 0, 0): -ln(e / (e + 2))
        let table = axis_table(3, 3);
        let lf = LabeledFeatures::new(Array2::eye(3), vec![0, 1, 2]).unwrap();
        let l = semantic_clustering_loss(&lf, &table, Reduction::Mean).unwrap();
        let e = std::f64::consts::E;
        let expected = -(e / (e + 2.0)).ln();
        assert!((l.value - expected).abs() < 1e-12);
        assert!((l.value - 0.551_444_713_932_051_5).abs() < 1e-12);

        let summed = semantic_clustering_loss(&lf, &table, Reduction::Sum).unwrap();
        assert!((summed.value - 3.0 * expected).abs() < 1e-12);
    }

    #[test]
    fn orthogonal_feature_gives_log_k() {
        let table = axis_table(2, 3);
        let lf = LabeledFeatures::new(array![[0.0, 0.0, 2.0]], vec![1]).unwrap();
        let l = semantic_clustering_loss(&lf, &table, Reduction::Mean).unwrap();
        assert!((l.value - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn errors() {
        let table = axis_table(3, 3);
        let zero = LabeledFeatures::new(array![[0.0, 0.0, 0.0]], vec![0]).unwrap();
        assert!(matches!(
            semantic_clustering_loss(&zero, &table, Reduction::Mean),
            Err(LossError::Domain(_))
        ));
        let wrong_dim = LabeledFeatures::new(array![[1.0, 0.0]], vec![0]).unwrap();
        assert!(matches!(
            semantic_clustering_loss(&wrong_dim, &table, Reduction::Mean),
            Err(LossError::Shape(_))
        ));
        let bad_label = LabeledFeatures::new(array![[1.0, 0.0, 0.0]], vec![3]).unwrap();
        assert!(semantic_clustering_loss(&bad_label, &table, Reduction::Mean).is_err());
        let single = axis_table(1, 3);
        let ok = LabeledFeatures::new(array![[1.0, 0.0, 0.0]], vec![0]).unwrap();
        assert!(semantic_clustering_loss(&ok, &single, Reduction::Mean).is_err());
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let names: Vec<String> = (0..5).map(|i| format!("c{i}")).collect();
        let table = synth_embeddings(&names, 16, 2, &[]).unwrap();
        let features = Array2::from_shape_fn((8, 16), |_| StandardNormal.sample(&mut rng));
        let labels = vec![0, 1, 2, 3, 4, 0, 1, 2];
        let mut inputs = Inputs::new();
        inputs.insert(keys::FEATURES.into(), features.into_dyn());
        let report = finite_difference_check(
            |inp| {
                let f = inp[keys::FEATURES].clone().into_dimensionality().unwrap();
                semantic_clustering_loss(&LabeledFeatures::new(f, labels.clone())?, &table, Reduction::Mean)
            },
            &inputs,
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_error <= 1e-4, "{report:?}");
        assert!(report.excluded.is_empty());
    }
}
