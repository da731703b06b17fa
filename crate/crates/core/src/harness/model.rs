use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::dataset::SyntheticScene;
use super::HarnessError;
use crate::geometry::BoxDeltas;
use crate::losses::Inputs;
use crate::losses::Tensor;

/// Parameter names used by [`ToyDetector::to_params`] and in checkpoints.
pub mod params {
    pub const PROJECTOR: &str = "projector";
    pub const PROJECTOR_BIAS: &str = "projector_bias";
    pub const CLASS_WEIGHT: &str = "class_weight";
    pub const CLASS_BIAS: &str = "class_bias";
    pub const REG_WEIGHT: &str = "reg_weight";
    pub const REG_BIAS: &str = "reg_bias";
    pub const OBJECTNESS_WEIGHT: &str = "objectness_weight";
    pub const OBJECTNESS_BIAS: &str = "objectness_bias";
    pub const CENTERNESS_WEIGHT: &str = "centerness_weight";
    pub const CENTERNESS_BIAS: &str = "centerness_bias";

    pub const ALL: [&str; 10] = [
        PROJECTOR,
        PROJECTOR_BIAS,
        CLASS_WEIGHT,
        CLASS_BIAS,
        REG_WEIGHT,
        REG_BIAS,
        OBJECTNESS_WEIGHT,
        OBJECTNESS_BIAS,
        CENTERNESS_WEIGHT,
        CENTERNESS_BIAS,
    ];
}

/// Linear detector: one affine projector into the embedding space, then
/// affine class (k known + background), box, objectness and centerness
/// heads on the projected feature.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyDetector {
    /// input_dim × d
    pub projector: Array2<f64>,
    pub projector_bias: Array1<f64>,
    /// d × (k + 1)
    pub class_weight: Array2<f64>,
    pub class_bias: Array1<f64>,
    /// d × 4
    pub reg_weight: Array2<f64>,
    pub reg_bias: Array1<f64>,
    pub objectness_weight: Array1<f64>,
    pub objectness_bias: f64,
    pub centerness_weight: Array1<f64>,
    pub centerness_bias: f64,
}

/// Head outputs for a batch of proposals, one row per proposal.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardBatch {
    pub features: Array2<f64>,
    pub class_logits: Array2<f64>,
    pub reg_deltas: Array2<f64>,
    pub objectness_logits: Array1<f64>,
    pub centerness_logits: Array1<f64>,
}

/// Loss gradients with respect to the head outputs of a [`ForwardBatch`].
#[derive(Debug, Clone, PartialEq)]
pub struct OutputGrads {
    pub features: Array2<f64>,
    pub class_logits: Array2<f64>,
    pub reg_deltas: Array2<f64>,
    pub objectness_logits: Array1<f64>,
    pub centerness_logits: Array1<f64>,
}

impl OutputGrads {
    pub fn zeros(rows: usize, d: usize, k: usize) -> Self {
        Self {
            features: Array2::zeros((rows, d)),
            class_logits: Array2::zeros((rows, k + 1)),
            reg_deltas: Array2::zeros((rows, 4)),
            objectness_logits: Array1::zeros(rows),
            centerness_logits: Array1::zeros(rows),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProposalOutput {
    /// Softmax over the k known classes and the trailing background slot.
    pub class_probs: Vec<f64>,
    pub deltas: BoxDeltas,
    pub objectness_logit: f64,
    pub centerness_logit: f64,
    pub feature: Vec<f64>,
}

fn softmax(row: impl Iterator<Item = f64> + Clone) -> Vec<f64> {
    let max = row.clone().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.map(|v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

impl ToyDetector {
    pub fn zeros(input_dim: usize, feature_dim: usize, num_known: usize) -> Self {
        Self {
            projector: Array2::zeros((input_dim, feature_dim)),
            projector_bias: Array1::zeros(feature_dim),
            class_weight: Array2::zeros((feature_dim, num_known + 1)),
            class_bias: Array1::zeros(num_known + 1),
            reg_weight: Array2::zeros((feature_dim, 4)),
            reg_bias: Array1::zeros(4),
            objectness_weight: Array1::zeros(feature_dim),
            objectness_bias: 0.0,
            centerness_weight: Array1::zeros(feature_dim),
            centerness_bias: 0.0,
        }
    }

    /// Gaussian projector with variance `1 / input_dim`, heads at 0.01
    /// scale, biases zero.
    pub fn init(input_dim: usize, feature_dim: usize, num_known: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let proj = Normal::new(0.0, (1.0 / input_dim as f64).sqrt()).expect("positive std");
        let head = Normal::new(0.0, 0.01).expect("positive std");
        let mut m = Self::zeros(input_dim, feature_dim, num_known);
        m.projector.iter_mut().for_each(|v| *v = proj.sample(&mut rng));
        m.class_weight.iter_mut().for_each(|v| *v = head.sample(&mut rng));
        m.reg_weight.iter_mut().for_each(|v| *v = head.sample(&mut rng));
        m.objectness_weight.iter_mut().for_each(|v| *v = head.sample(&mut rng));
        m.centerness_weight.iter_mut().for_each(|v| *v = head.sample(&mut rng));
        m
    }

    pub fn input_dim(&self) -> usize {
        self.projector.nrows()
    }

    pub fn feature_dim(&self) -> usize {
        self.projector.ncols()
    }

    /// Known classes; the class head has one more output.
    pub fn num_known(&self) -> usize {
        self.class_bias.len() - 1
    }

    pub fn is_finite(&self) -> bool {
        self.to_params().values().all(|t| t.iter().all(|v| v.is_finite()))
    }

    pub fn forward_batch(&self, x: ArrayView2<'_, f64>) -> ForwardBatch {
        let features = x.dot(&self.projector) + &self.projector_bias;
        ForwardBatch {
            class_logits: features.dot(&self.class_weight) + &self.class_bias,
            reg_deltas: features.dot(&self.reg_weight) + &self.reg_bias,
            objectness_logits: features.dot(&self.objectness_weight) + self.objectness_bias,
            centerness_logits: features.dot(&self.centerness_weight) + self.centerness_bias,
            features,
        }
    }

    /// Parameter gradients from output gradients (returned in the shape of
    /// a detector).
    pub fn backward(&self, x: ArrayView2<'_, f64>, fwd: &ForwardBatch, g: &OutputGrads) -> ToyDetector {
        let f = &fwd.features;
        let col = |v: &Array1<f64>| v.view().insert_axis(Axis(1)).to_owned();
        let row = |v: &Array1<f64>| v.view().insert_axis(Axis(0)).to_owned();
        let mut df = g.features.clone();
        df += &g.class_logits.dot(&self.class_weight.t());
        df += &g.reg_deltas.dot(&self.reg_weight.t());
        df += &col(&g.objectness_logits).dot(&row(&self.objectness_weight));
        df += &col(&g.centerness_logits).dot(&row(&self.centerness_weight));
        ToyDetector {
            projector: x.t().dot(&df),
            projector_bias: df.sum_axis(Axis(0)),
            class_weight: f.t().dot(&g.class_logits),
            class_bias: g.class_logits.sum_axis(Axis(0)),
            reg_weight: f.t().dot(&g.reg_deltas),
            reg_bias: g.reg_deltas.sum_axis(Axis(0)),
            objectness_weight: f.t().dot(&g.objectness_logits),
            objectness_bias: g.objectness_logits.sum(),
            centerness_weight: f.t().dot(&g.centerness_logits),
            centerness_bias: g.centerness_logits.sum(),
        }
    }

    /// `self -= lr * grad`
    pub fn sgd_step(&mut self, grad: &ToyDetector, lr: f64) {
        self.projector.scaled_add(-lr, &grad.projector);
        self.projector_bias.scaled_add(-lr, &grad.projector_bias);
        self.class_weight.scaled_add(-lr, &grad.class_weight);
        self.class_bias.scaled_add(-lr, &grad.class_bias);
        self.reg_weight.scaled_add(-lr, &grad.reg_weight);
        self.reg_bias.scaled_add(-lr, &grad.reg_bias);
        self.objectness_weight.scaled_add(-lr, &grad.objectness_weight);
        self.objectness_bias -= lr * grad.objectness_bias;
        self.centerness_weight.scaled_add(-lr, &grad.centerness_weight);
        self.centerness_bias -= lr * grad.centerness_bias;
    }

    pub fn to_params(&self) -> Inputs {
        use params::*;
        let scalar = |v: f64| Tensor::from_elem(ndarray::IxDyn(&[]), v);
        [
            (PROJECTOR, self.projector.clone().into_dyn()),
            (PROJECTOR_BIAS, self.projector_bias.clone().into_dyn()),
            (CLASS_WEIGHT, self.class_weight.clone().into_dyn()),
            (CLASS_BIAS, self.class_bias.clone().into_dyn()),
            (REG_WEIGHT, self.reg_weight.clone().into_dyn()),
            (REG_BIAS, self.reg_bias.clone().into_dyn()),
            (OBJECTNESS_WEIGHT, self.objectness_weight.clone().into_dyn()),
            (OBJECTNESS_BIAS, scalar(self.objectness_bias)),
            (CENTERNESS_WEIGHT, self.centerness_weight.clone().into_dyn()),
            (CENTERNESS_BIAS, scalar(self.centerness_bias)),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }

    pub fn from_params(p: &Inputs) -> Result<Self, HarnessError> {
        use params::*;
        let get = |name: &str| p.get(name).ok_or_else(|| HarnessError::Model(format!("missing parameter {name}")));
        let matrix = |name: &str| -> Result<Array2<f64>, HarnessError> {
            get(name)?
                .clone()
                .into_dimensionality()
                .map_err(|_| HarnessError::Model(format!("{name} must be a matrix")))
        };
        let vector = |name: &str| -> Result<Array1<f64>, HarnessError> {
            get(name)?
                .clone()
                .into_dimensionality()
                .map_err(|_| HarnessError::Model(format!("{name} must be a vector")))
        };
        let scalar = |name: &str| -> Result<f64, HarnessError> {
            let t = get(name)?;
            match t.ndim() {
                0 => Ok(t[[]]),
                _ if t.len() == 1 => Ok(*t.iter().next().expect("one element")),
                _ => Err(HarnessError::Model(format!("{name} must be a scalar"))),
            }
        };
        let m = Self {
            projector: matrix(PROJECTOR)?,
            projector_bias: vector(PROJECTOR_BIAS)?,
            class_weight: matrix(CLASS_WEIGHT)?,
            class_bias: vector(CLASS_BIAS)?,
            reg_weight: matrix(REG_WEIGHT)?,
            reg_bias: vector(REG_BIAS)?,
            objectness_weight: vector(OBJECTNESS_WEIGHT)?,
            objectness_bias: scalar(OBJECTNESS_BIAS)?,
            centerness_weight: vector(CENTERNESS_WEIGHT)?,
            centerness_bias: scalar(CENTERNESS_BIAS)?,
        };
        m.check_shapes()?;
        Ok(m)
    }

    pub fn check_shapes(&self) -> Result<(), HarnessError> {
        let d = self.feature_dim();
        let k1 = self.class_bias.len();
        let ok = k1 >= 3
            && self.projector_bias.len() == d
            && self.class_weight.dim() == (d, k1)
            && self.reg_weight.dim() == (d, 4)
            && self.reg_bias.len() == 4
            && self.objectness_weight.len() == d
            && self.centerness_weight.len() == d;
        if ok {
            Ok(())
        } else {
            Err(HarnessError::Model("inconsistent parameter shapes".into()))
        }
    }
}

/// Runs every proposal of `scene` through the model, in proposal order.
pub fn forward(model: &ToyDetector, scene: &SyntheticScene) -> Result<Vec<ProposalOutput>, HarnessError> {
    if scene.proposals.is_empty() {
        return Ok(Vec::new());
    }
    let dim = model.input_dim();
    if let Some(p) = scene.proposals.iter().find(|p| p.feature.len() != dim) {
        return Err(HarnessError::Model(format!(
            "proposal feature has length {}, model expects {dim}",
            p.feature.len()
        )));
    }
    let flat: Vec<f64> = scene.proposals.iter().flat_map(|p| p.feature.iter().copied()).collect();
    let x = Array2::from_shape_vec((scene.proposals.len(), dim), flat).expect("rows of equal length");
    let out = model.forward_batch(x.view());
    Ok((0..scene.proposals.len())
        .map(|i| {
            let r = out.reg_deltas.row(i);
            ProposalOutput {
                class_probs: softmax(out.class_logits.row(i).iter().copied()),
                deltas: BoxDeltas::from_array([r[0], r[1], r[2], r[3]]),
                objectness_logit: out.objectness_logits[i],
                centerness_logit: out.centerness_logits[i],
                feature: out.features.row(i).to_vec(),
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Box;
    use crate::harness::dataset::Proposal;
    use ndarray::array;

    fn scene(features: Vec<Vec<f64>>) -> SyntheticScene {
        SyntheticScene {
            image_id: "s".into(),
            objects: vec![],
            proposals: features
                .into_iter()
                .map(|feature| Proposal {
                    bbox: Box::new(0.0, 0.0, 1.0, 1.0).unwrap(),
                    feature,
                    is_object: false,
                    target: None,
                })
                .collect(),
        }
    }

    #[test]
    fn zero_weights_give_uniform_probs() {
        let m = ToyDetector::zeros(3, 2, 3);
        let out = forward(&m, &scene(vec![vec![1.0, -2.0, 0.5]])).unwrap();
        assert_eq!(out[0].class_probs, vec![0.25; 4]);
        assert_eq!((out[0].objectness_logit, out[0].centerness_logit), (0.0, 0.0));
        assert_eq!(out[0].deltas, BoxDeltas::ZERO);
    }

    #[test]
    fn hand_set_weights() {
        let mut m = ToyDetector::zeros(2, 2, 2);
        m.projector = array![[1.0, 0.0], [0.0, 2.0]];
        m.projector_bias = array![0.5, 0.0];
        m.class_weight = array![[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]];
        m.objectness_weight = array![1.0, 1.0];
        m.objectness_bias = -1.0;
        m.centerness_weight = array![0.0, 0.25];
        m.reg_bias = array![0.1, 0.2, 0.3, 0.4];
        let out = &forward(&m, &scene(vec![vec![1.0, 1.0]])).unwrap()[0];
        // feature (1.5, 2); logits (1.5, 2, 0)
        assert_eq!(out.feature, vec![1.5, 2.0]);
        let z = 1.5f64.exp() + 2f64.exp() + 1.0;
        let expected = [1.5f64.exp() / z, 2f64.exp() / z, 1.0 / z];
        for (p, e) in out.class_probs.iter().zip(expected) {
            assert!((p - e).abs() < 1e-15);
        }
        assert_eq!(out.objectness_logit, 2.5);
        assert_eq!(out.centerness_logit, 0.5);
        assert_eq!(out.deltas.to_array(), [0.1, 0.2, 0.3, 0.4]);
    }

    #[test]
    fn batch_rows_preserve_order() {
        let m = ToyDetector::init(3, 4, 2, 9);
        let feats: Vec<Vec<f64>> = (0..5).map(|i| vec![i as f64, 1.0, -(i as f64)]).collect();
        let all = forward(&m, &scene(feats.clone())).unwrap();
        assert_eq!(all.len(), 5);
        for (i, f) in feats.into_iter().enumerate() {
            assert_eq!(forward(&m, &scene(vec![f])).unwrap()[0], all[i]);
        }
        assert!(forward(&m, &scene(vec![])).unwrap().is_empty());
    }

    #[test]
    fn params_round_trip() {
        let m = ToyDetector::init(6, 4, 3, 1);
        assert_eq!(ToyDetector::from_params(&m.to_params()).unwrap(), m);
        let mut p = m.to_params();
        p.remove(params::REG_BIAS);
        assert!(ToyDetector::from_params(&p).is_err());
    }

    #[test]
    fn wrong_input_length_rejected() {
        let m = ToyDetector::zeros(3, 2, 2);
        assert!(forward(&m, &scene(vec![vec![1.0]])).is_err());
    }
}
