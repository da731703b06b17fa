//! Training objectives with analytic gradients.
//!
//! Every loss returns a [`DifferentiableScalar`]: its value plus gradients
//! keyed by input name. Composite objectives (object focus, the full
//! training objective) chain constituent gradients through their own
//! partial derivatives, so the caller only ever backpropagates from the
//! named inputs.

mod decorrelation;
mod detection;
mod focus;
mod gradcheck;
mod semantic;
mod suite;
mod total;

use std::collections::BTreeMap;

use ndarray::{Array2, ArrayD, Axis, IxDyn};
use thiserror::Error;

pub use decorrelation::{class_decorrelation_loss, sample_per_class, sample_per_class_indices};
pub use detection::{classification_loss, regression_loss, smooth_l1};
pub use focus::{centerness_loss, object_focus_loss, objectness_loss, sigmoid};
pub use gradcheck::{finite_difference_check, GradCheckReport, Inputs, DEFAULT_FD_STEP};
pub use semantic::semantic_clustering_loss;
pub use suite::{gradient_suite, SuiteResult, SATURATED_TOLERANCE, SUITE_TOLERANCE};
pub use total::{total_loss, LossParts, NoUnknownProbabilityLoss, UnknownProbabilityLoss};

/// Gradient-carrying tensor of arbitrary rank.
pub type Tensor = ArrayD<f64>;

/// Default gradient keys.
pub mod keys {
    pub const FEATURES: &str = "features";
    pub const CLASS_LOGITS: &str = "class_logits";
    pub const REG_DELTAS: &str = "reg_deltas";
    pub const RPN_REG_DELTAS: &str = "rpn_reg_deltas";
    pub const OBJECTNESS_LOGITS: &str = "objectness_logits";
    pub const CENTERNESS_LOGITS: &str = "centerness_logits";
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LossError {
    #[error("domain error: {0}")]
    Domain(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("class decorrelation needs at least 2 sampled classes, got {0}")]
    InsufficientClasses(usize),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("invalid configuration: {0}")]
    Config(String),
}

/// A scalar loss value with gradients with respect to named inputs.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct DifferentiableScalar {
    pub value: f64,
    pub grads: BTreeMap<String, Tensor>,
}

impl DifferentiableScalar {
    pub fn zero() -> Self {
        Self::default()
    }

    pub fn with_grad(value: f64, name: &str, grad: Tensor) -> Self {
        let mut grads = BTreeMap::new();
        grads.insert(name.to_string(), grad);
        Self { value, grads }
    }

    pub fn grad(&self, name: &str) -> Option<&Tensor> {
        self.grads.get(name)
    }

    /// `self += weight * other`, summing gradients that share a key.
    pub fn add_scaled(&mut self, other: &DifferentiableScalar, weight: f64) -> Result<(), LossError> {
        self.value += weight * other.value;
        for (name, g) in &other.grads {
            match self.grads.get_mut(name) {
                Some(acc) => {
                    if acc.shape() != g.shape() {
                        return Err(LossError::Shape(format!(
                            "gradient `{name}`: {:?} vs {:?}",
                            acc.shape(),
                            g.shape()
                        )));
                    }
                    acc.scaled_add(weight, g);
                }
                None => {
                    self.grads.insert(name.clone(), g * weight);
                }
            }
        }
        Ok(())
    }

    pub fn scaled(&self, weight: f64) -> Self {
        Self {
            value: weight * self.value,
            grads: self.grads.iter().map(|(k, g)| (k.clone(), g * weight)).collect(),
        }
    }

    /// Moves the gradient stored under `from` to `to`.
    pub fn renamed(mut self, from: &str, to: &str) -> Self {
        if let Some(g) = self.grads.remove(from) {
            self.grads.insert(to.to_string(), g);
        }
        self
    }

    /// Lifts a gradient computed on a row subset back to the full tensor:
    /// row `r` of the stored gradient lands at row `rows[r]` of a tensor with
    /// `total_rows` rows, other rows zero.
    pub fn scatter_rows(mut self, name: &str, rows: &[usize], total_rows: usize) -> Result<Self, LossError> {
        let Some(g) = self.grads.remove(name) else {
            return Ok(self);
        };
        if g.ndim() == 0 || g.shape()[0] != rows.len() {
            return Err(LossError::Shape(format!(
                "scatter of `{name}`: {} indices for shape {:?}",
                rows.len(),
                g.shape()
            )));
        }
        let mut shape = g.shape().to_vec();
        shape[0] = total_rows;
        let mut full = ArrayD::zeros(IxDyn(&shape));
        for (r, &dst) in rows.iter().enumerate() {
            if dst >= total_rows {
                return Err(LossError::Shape(format!("row index {dst} out of {total_rows}")));
            }
            let mut target = full.index_axis_mut(Axis(0), dst);
            target += &g.index_axis(Axis(0), r);
        }
        self.grads.insert(name.to_string(), full);
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
        self.value.is_finite() && self.grads.values().all(|g| g.iter().all(|v| v.is_finite()))
    }

    pub(crate) fn ensure_finite(self, what: &str) -> Result<Self, LossError> {
        if self.is_finite() {
            Ok(self)
        } else {
            Err(LossError::NonFinite(format!("{what} = {}", self.value)))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Reduction {
    #[default]
    Mean,
    Sum,
}

impl Reduction {
    /// Scale applied to a sum over `n` terms.
    pub fn factor(self, n: usize) -> f64 {
        match self {
            Reduction::Mean => 1.0 / n as f64,
            Reduction::Sum => 1.0,
        }
    }
}

/// How the centerness and objectness losses merge into the object focus loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Combiner {
    #[default]
    GeometricMean,
    Sum,
    Product,
    ObjectnessOnly,
    CenternessOnly,
}

impl Combiner {
    pub const ALL: [Combiner; 5] = [
        Combiner::GeometricMean,
        Combiner::Sum,
        Combiner::Product,
        Combiner::ObjectnessOnly,
        Combiner::CenternessOnly,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Combiner::GeometricMean => "geometric_mean",
            Combiner::Sum => "sum",
            Combiner::Product => "product",
            Combiner::ObjectnessOnly => "objectness_only",
            Combiner::CenternessOnly => "centerness_only",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.name() == s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    /// Weight of the semantic clustering term.
    pub alpha1: f64,
    /// Weight of the class decorrelation term.
    pub alpha2: f64,
    /// Weight of the object focus term.
    pub alpha3: f64,
    pub centerness_eps: f64,
    pub gm_eps: f64,
    pub decorrelation_temperature: f64,
    pub combiner: Combiner,
    pub reduction: Reduction,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            alpha1: 0.05,
            alpha2: 0.05,
            alpha3: 1.0,
            centerness_eps: 1e-8,
            gm_eps: 1e-12,
            decorrelation_temperature: 1.0,
            combiner: Combiner::GeometricMean,
            reduction: Reduction::Mean,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<(), LossError> {
        let weights = [("alpha1", self.alpha1), ("alpha2", self.alpha2), ("alpha3", self.alpha3)];
        for (name, w) in weights {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(LossError::Config(format!("{name} must be a finite non-negative number, got {w}")));
            }
        }
        let positives = [
            ("centerness_eps", self.centerness_eps),
            ("gm_eps", self.gm_eps),
            ("decorrelation_temperature", self.decorrelation_temperature),
        ];
        for (name, v) in positives {
            if !(v > 0.0 && v.is_finite()) {
                return Err(LossError::Config(format!("{name} must be positive, got {v}")));
            }
        }
        Ok(())
    }
}

/// Feature rows with their known-class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledFeatures {
    pub features: Array2<f64>,
    pub labels: Vec<usize>,
}

impl LabeledFeatures {
    pub fn new(features: Array2<f64>, labels: Vec<usize>) -> Result<Self, LossError> {
        if features.nrows() == 0 {
            return Err(LossError::Shape("at least one feature row is required".into()));
        }
        if features.nrows() != labels.len() {
            return Err(LossError::Shape(format!(
                "{} feature rows but {} labels",
                features.nrows(),
                labels.len()
            )));
        }
        Ok(Self { features, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }
}

/// Numerically stable `ln(Σ exp(x))`.
pub(crate) fn log_sum_exp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + xs.map(|x| (x - max).exp()).sum::<f64>().ln()
}
