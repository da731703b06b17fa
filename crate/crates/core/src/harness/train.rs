use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::dataset::{generate_dataset, Dataset, DatasetSpec, SyntheticScene};
use super::model::{forward, ForwardBatch, OutputGrads, ToyDetector};
use super::HarnessError;
use crate::embeddings::ClassEmbeddingTable;
use crate::geometry::{box_deltas, centerness_target, Box, CenterBox};
use crate::losses::{
    class_decorrelation_loss, classification_loss, keys, object_focus_loss, objectness_loss, regression_loss,
    sample_per_class, semantic_clustering_loss, centerness_loss, total_loss, Combiner, DifferentiableScalar,
    LabeledFeatures, LossConfig, LossError, LossParts, Tensor,
};
use crate::metrics::{entropy_threshold, Detection, Label};

/// Negatives kept per positive when sampling a batch.
pub const NEGATIVES_PER_POSITIVE: usize = 3;
/// Proposals whose objectness probability falls below this are discarded
/// at inference.
pub const OBJECTNESS_CUTOFF: f64 = 0.5;
/// Bound on predicted log-scale deltas when decoding boxes.
const MAX_LOG_SCALE: f64 = 4.0;

/// Which of the three alignment modules are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ModuleSwitches {
    pub sc: bool,
    pub cd: bool,
    pub of: bool,
}

impl ModuleSwitches {
    pub const ALL_ON: Self = Self { sc: true, cd: true, of: true };
    pub const ALL_OFF: Self = Self { sc: false, cd: false, of: false };

    /// The ablation grid: single modules, pairs, all three, none.
    pub const GRID: [Self; 8] = [
        Self { sc: true, cd: false, of: false },
        Self { sc: false, cd: true, of: false },
        Self { sc: false, cd: false, of: true },
        Self { sc: true, cd: true, of: false },
        Self { sc: true, cd: false, of: true },
        Self { sc: false, cd: true, of: true },
        Self::ALL_ON,
        Self::ALL_OFF,
    ];

    /// `SC+CD+OF`-style name; `none` when everything is off.
    pub fn label(self) -> String {
        let parts: Vec<&str> = [(self.sc, "SC"), (self.cd, "CD"), (self.of, "OF")]
            .into_iter()
            .filter_map(|(on, n)| on.then_some(n))
            .collect();
        if parts.is_empty() {
            "none".into()
        } else {
            parts.join("+")
        }
    }

    pub fn from_label(s: &str) -> Option<Self> {
        if s == "none" {
            return Some(Self::ALL_OFF);
        }
        let mut out = Self::ALL_OFF;
        for part in s.split('+') {
            let slot = match part {
                "SC" => &mut out.sc,
                "CD" => &mut out.cd,
                "OF" => &mut out.of,
                _ => return None,
            };
            if std::mem::replace(slot, true) {
                return None;
            }
        }
        Some(out)
    }

    /// Disabled SC/CD get zero weight; disabled OF keeps the objectness
    /// loss alone.
    pub fn apply(self, base: &LossConfig) -> LossConfig {
        LossConfig {
            alpha1: if self.sc { base.alpha1 } else { 0.0 },
            alpha2: if self.cd { base.alpha2 } else { 0.0 },
            combiner: if self.of { base.combiner } else { Combiner::ObjectnessOnly },
            ..*base
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub loss: LossConfig,
    pub learning_rate: f64,
    pub iterations: usize,
    pub batch_images: usize,
    pub switches: ModuleSwitches,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            loss: LossConfig::default(),
            learning_rate: 0.01,
            iterations: 2000,
            batch_images: 4,
            switches: ModuleSwitches::ALL_ON,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), HarnessError> {
        self.loss.validate()?;
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(HarnessError::Config(format!("learning_rate {} must be finite and >= 0", self.learning_rate)));
        }
        if self.iterations == 0 || self.batch_images == 0 {
            return Err(HarnessError::Config("iterations and batch_images must be >= 1".into()));
        }
        Ok(())
    }

    pub fn effective_loss(&self) -> LossConfig {
        self.switches.apply(&self.loss)
    }
}

/// Training inputs for one step, with every target precomputed.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub x: Array2<f64>,
    /// Known class per row; `k` (the background slot) for non-objects.
    pub labels: Vec<usize>,
    pub is_object: Vec<bool>,
    /// Rows that are known-class positives.
    pub positives: Vec<usize>,
    /// Box targets for `positives`, same order.
    pub reg_targets: Array2<f64>,
    /// Positive rows whose centerness target survives the negative filter.
    pub centerness_rows: Vec<usize>,
    pub centerness_targets: Vec<f64>,
    /// Seed for the per-class draw of the decorrelation term.
    pub cd_seed: u64,
}

fn center(b: &Box) -> CenterBox {
    b.to_center().expect("valid box")
}

impl Batch {
    /// `picks` holds (scene index, proposal index) pairs.
    pub fn from_proposals(
        scenes: &[SyntheticScene],
        picks: &[(usize, usize)],
        num_known: usize,
        centerness_eps: f64,
        cd_seed: u64,
    ) -> Result<Self, HarnessError> {
        let dim = picks
            .first()
            .map(|&(s, p)| scenes[s].proposals[p].feature.len())
            .ok_or_else(|| HarnessError::Config("empty batch".into()))?;
        let mut flat = Vec::with_capacity(picks.len() * dim);
        let mut out = Batch {
            x: Array2::zeros((0, dim)),
            labels: Vec::with_capacity(picks.len()),
            is_object: Vec::with_capacity(picks.len()),
            positives: Vec::new(),
            reg_targets: Array2::zeros((0, 4)),
            centerness_rows: Vec::new(),
            centerness_targets: Vec::new(),
            cd_seed,
        };
        let mut reg = Vec::new();
        for (row, &(si, pi)) in picks.iter().enumerate() {
            let scene = &scenes[si];
            let p = &scene.proposals[pi];
            flat.extend_from_slice(&p.feature);
            out.is_object.push(p.is_object);
            let object = p.target.filter(|_| p.is_object).map(|t| &scene.objects[t]);
            match object.map(|o| (o, o.gt.label)) {
                Some((o, Label::Known(c))) if c < num_known => {
                    out.labels.push(c);
                    out.positives.push(row);
                    let d = box_deltas(&center(&o.gt.bbox), &center(&p.bbox));
                    reg.extend_from_slice(&d.to_array());
                    if let Some(t) = centerness_target(&d, centerness_eps) {
                        out.centerness_rows.push(row);
                        out.centerness_targets.push(t);
                    }
                }
                _ => out.labels.push(num_known),
            }
        }
        out.x = Array2::from_shape_vec((picks.len(), dim), flat)
            .map_err(|_| HarnessError::Model("proposal features differ in length".into()))?;
        out.reg_targets = Array2::from_shape_vec((out.positives.len(), 4), reg).expect("four deltas per positive");
        Ok(out)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Every term of the objective for one batch, with gradients keyed by head
/// output (see [`keys`]).
pub fn batch_loss_parts(
    fwd: &ForwardBatch,
    batch: &Batch,
    table: &ClassEmbeddingTable,
    cfg: &LossConfig,
) -> Result<LossParts, LossError> {
    let m = batch.len();
    let mut parts = LossParts {
        classification: classification_loss(fwd.class_logits.view(), &batch.labels)?,
        ..LossParts::default()
    };

    let lobj = objectness_loss(fwd.objectness_logits.as_slice().expect("contiguous"), &batch.is_object, cfg.reduction)?;
    let ctr_logits: Vec<f64> = batch.centerness_rows.iter().map(|&r| fwd.centerness_logits[r]).collect();
    let lc = centerness_loss(&ctr_logits, &batch.centerness_targets, cfg.reduction)?.scatter_rows(
        keys::CENTERNESS_LOGITS,
        &batch.centerness_rows,
        m,
    )?;
    parts.object_focus = object_focus_loss(&lc, &lobj, cfg.combiner, cfg.gm_eps)?;

    if batch.positives.is_empty() {
        return Ok(parts);
    }
    let pos_features = fwd.features.select(ndarray::Axis(0), &batch.positives);
    let pos_labels: Vec<usize> = batch.positives.iter().map(|&r| batch.labels[r]).collect();
    let pred = fwd.reg_deltas.select(ndarray::Axis(0), &batch.positives);
    parts.regression = regression_loss(pred.view(), batch.reg_targets.view())?.scatter_rows(
        keys::REG_DELTAS,
        &batch.positives,
        m,
    )?;

    let lf = LabeledFeatures::new(pos_features, pos_labels)?;
    if cfg.alpha1 != 0.0 {
        parts.semantic_clustering =
            semantic_clustering_loss(&lf, table, cfg.reduction)?.scatter_rows(keys::FEATURES, &batch.positives, m)?;
    }
    if cfg.alpha2 != 0.0 {
        let sampled_rows = crate::losses::sample_per_class_indices(&lf.labels, batch.cd_seed);
        if sampled_rows.len() >= 2 {
            let sampled = sample_per_class(&lf, batch.cd_seed);
            let rows: Vec<usize> = sampled_rows.iter().map(|&i| batch.positives[i]).collect();
            parts.class_decorrelation = class_decorrelation_loss(&sampled, cfg.decorrelation_temperature)?
                .scatter_rows(keys::FEATURES, &rows, m)?;
        }
    }
    Ok(parts)
}

fn tensor_to_1d(t: Option<&Tensor>, n: usize) -> Array1<f64> {
    t.map(|g| g.iter().copied().collect()).unwrap_or_else(|| Array1::zeros(n))
}

fn tensor_to_2d(t: Option<&Tensor>, rows: usize, cols: usize) -> Array2<f64> {
    t.map(|g| g.clone().into_shape_with_order((rows, cols)).expect("gradient shaped like its output"))
        .unwrap_or_else(|| Array2::zeros((rows, cols)))
}

/// Total objective for `batch` with gradients with respect to every model
/// parameter (keyed by [`super::model::params`] names).
pub fn batch_objective(
    model: &ToyDetector,
    batch: &Batch,
    table: &ClassEmbeddingTable,
    cfg: &LossConfig,
) -> Result<(DifferentiableScalar, LossParts), LossError> {
    let fwd = model.forward_batch(batch.x.view());
    let parts = batch_loss_parts(&fwd, batch, table, cfg)?;
    let total = total_loss(&parts, None, cfg)?;
    let (m, d, k) = (batch.len(), model.feature_dim(), model.num_known());
    let grads = OutputGrads {
        features: tensor_to_2d(total.grad(keys::FEATURES), m, d),
        class_logits: tensor_to_2d(total.grad(keys::CLASS_LOGITS), m, k + 1),
        reg_deltas: tensor_to_2d(total.grad(keys::REG_DELTAS), m, 4),
        objectness_logits: tensor_to_1d(total.grad(keys::OBJECTNESS_LOGITS), m),
        centerness_logits: tensor_to_1d(total.grad(keys::CENTERNESS_LOGITS), m),
    };
    let param_grads = model.backward(batch.x.view(), &fwd, &grads);
    Ok((
        DifferentiableScalar {
            value: total.value,
            grads: param_grads.to_params(),
        },
        parts,
    ))
}

/// Picks `batch_images` scenes, keeps all their positives and up to
/// [`NEGATIVES_PER_POSITIVE`] negatives per positive.
pub fn sample_batch(
    scenes: &[SyntheticScene],
    batch_images: usize,
    num_known: usize,
    centerness_eps: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Batch, HarnessError> {
    let mut pos = Vec::new();
    let mut neg = Vec::new();
    for _ in 0..batch_images {
        let si = rng.random_range(0..scenes.len());
        for (pi, p) in scenes[si].proposals.iter().enumerate() {
            if p.is_object {
                pos.push((si, pi));
            } else {
                neg.push((si, pi));
            }
        }
    }
    neg.shuffle(rng);
    neg.truncate(NEGATIVES_PER_POSITIVE * pos.len().max(1));
    pos.extend(neg);
    let cd_seed = rng.random();
    Batch::from_proposals(scenes, &pos, num_known, centerness_eps, cd_seed)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub model: ToyDetector,
    /// Total loss of every iteration's batch, before its update.
    pub loss_history: Vec<f64>,
}

fn describe(parts: &LossParts) -> String {
    format!(
        "focus={} sc={} cd={} reg={} ce={}",
        parts.object_focus.value,
        parts.semantic_clustering.value,
        parts.class_decorrelation.value,
        parts.regression.value,
        parts.classification.value
    )
}

/// Plain SGD on the total loss over `data.train`.
pub fn train_on(data: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome, HarnessError> {
    cfg.validate()?;
    if data.train.is_empty() {
        return Err(HarnessError::Config("no training scenes".into()));
    }
    let loss_cfg = cfg.effective_loss();
    let k = data.known_classes.len();
    let mut model = ToyDetector::init(data.input_dim(), data.embeddings.dim(), k, cfg.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7a11_5eed);
    let mut loss_history = Vec::with_capacity(cfg.iterations);
    for iteration in 0..cfg.iterations {
        let batch = sample_batch(&data.train, cfg.batch_images, k, loss_cfg.centerness_eps, &mut rng)?;
        let (total, parts) = batch_objective(&model, &batch, &data.embeddings, &loss_cfg).map_err(|e| match e {
            LossError::NonFinite(what) => HarnessError::NonFinite {
                iteration,
                detail: what,
            },
            other => other.into(),
        })?;
        if !total.value.is_finite() || !total.is_finite() {
            return Err(HarnessError::NonFinite {
                iteration,
                detail: describe(&parts),
            });
        }
        loss_history.push(total.value);
        let grad = ToyDetector::from_params(&total.grads)?;
        model.sgd_step(&grad, cfg.learning_rate);
    }
    Ok(TrainOutcome { model, loss_history })
}

pub fn train(spec: &DatasetSpec, cfg: &TrainConfig) -> Result<TrainOutcome, HarnessError> {
    train_on(&generate_dataset(spec)?, cfg)
}

/// Detections for one scene. Objectness decides object versus background:
/// proposals under [`OBJECTNESS_CUTOFF`] are dropped. Survivors take the
/// most probable known class as label and its probability as score; the
/// background slot only contributes to the entropy. Boxes are decoded from
/// the predicted deltas. With an entropy threshold, uncertain detections are
/// relabeled unknown.
pub fn predict(
    model: &ToyDetector,
    scene: &SyntheticScene,
    entropy: Option<f64>,
) -> Result<Vec<Detection>, HarnessError> {
    let k = model.num_known();
    let mut dets = Vec::new();
    for (p, out) in scene.proposals.iter().zip(forward(model, scene)?) {
        if crate::losses::sigmoid(out.objectness_logit) < OBJECTNESS_CUTOFF {
            continue;
        }
        let (best, score) = out.class_probs[..k]
            .iter()
            .copied()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |acc, (i, v)| if v > acc.1 { (i, v) } else { acc });
        let mut d = out.deltas;
        d.dw = d.dw.clamp(-MAX_LOG_SCALE, MAX_LOG_SCALE);
        d.dh = d.dh.clamp(-MAX_LOG_SCALE, MAX_LOG_SCALE);
        let refined = center(&p.bbox).apply_deltas(&d).to_corners();
        let bbox = if refined.validate().is_ok() { refined } else { p.bbox };
        dets.push(Detection {
            image_id: scene.image_id.clone(),
            bbox,
            label: Label::Known(best),
            score: score.clamp(0.0, 1.0),
            class_probs: Some(out.class_probs),
        });
    }
    match entropy {
        Some(t) => Ok(entropy_threshold(&dets, t)?),
        None => Ok(dets),
    }
}

pub fn predict_all(
    model: &ToyDetector,
    scenes: &[SyntheticScene],
    entropy: Option<f64>,
) -> Result<Vec<Detection>, HarnessError> {
    let mut out = Vec::new();
    for s in scenes {
        out.extend(predict(model, s, entropy)?);
    }
    Ok(out)
}
