use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::HarnessError;
use crate::embeddings::{synth_embeddings, ClassEmbeddingTable, SimilarityPair};
use crate::geometry::{box_deltas, iou, Box};
use crate::metrics::{GroundTruthObject, Label};

/// Extra input channels carrying the proposal-to-object box deltas, the
/// stand-in for the spatial evidence a real backbone would see.
pub const GEOMETRY_CHANNELS: usize = 4;

/// Proposals at or above this IoU with an object are positives.
pub const POSITIVE_IOU: f64 = 0.5;
/// Random negatives overlap every object by less than this.
pub const NEGATIVE_MAX_IOU: f64 = 0.3;

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSpec {
    pub known_classes: Vec<String>,
    pub unknown_classes: Vec<String>,
    /// Dimension of the class anchors (and of the projected features).
    pub feature_dim: usize,
    /// Inclusive range.
    pub objects_per_image: (usize, usize),
    pub images_train: usize,
    pub images_test: usize,
    /// Unknown-only test images per known test image.
    pub wilderness_ratio: f64,
    pub noise_sigma: f64,
    pub proximity_pairs: Vec<SimilarityPair>,
    /// Strength of the class-agnostic direction shared by every object.
    pub objectness_cue: f64,
    /// Multiplies every raw proposal feature before noise is added.
    pub feature_scale: f64,
    pub image_size: f64,
    pub jitter: f64,
    pub negatives_per_image: usize,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        let names = |v: &[&str]| v.iter().map(|s| s.to_string()).collect::<Vec<_>>();
        Self {
            known_classes: names(&["horse", "dog", "cat", "sheep", "cow", "bird", "car", "bus"]),
            unknown_classes: names(&["zebra", "giraffe", "truck"]),
            feature_dim: 32,
            objects_per_image: (1, 3),
            images_train: 200,
            images_test: 100,
            wilderness_ratio: 1.0,
            noise_sigma: 0.05,
            proximity_pairs: vec![SimilarityPair::new("zebra", "horse", 0.8)],
            objectness_cue: 0.5,
            feature_scale: 6.0,
            image_size: 128.0,
            jitter: 0.1,
            negatives_per_image: 4,
            seed: 0,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: String| Err(HarnessError::Spec(m));
        if self.known_classes.len() < 2 {
            return bad("at least two known classes are required".into());
        }
        if let Some(c) = self.known_classes.iter().find(|c| self.unknown_classes.contains(c)) {
            return bad(format!("class {c:?} is both known and unknown"));
        }
        let (lo, hi) = self.objects_per_image;
        if lo == 0 || lo > hi {
            return bad(format!("objects_per_image range {lo}..={hi} is empty or allows zero"));
        }
        if self.images_train == 0 {
            return bad("images_train must be positive".into());
        }
        if !(self.wilderness_ratio >= 0.0 && self.wilderness_ratio.is_finite()) {
            return bad(format!("wilderness_ratio {} must be finite and >= 0", self.wilderness_ratio));
        }
        if self.wilderness_ratio > 0.0 && self.unknown_classes.is_empty() {
            return bad("a positive wilderness_ratio needs unknown classes".into());
        }
        if !(self.noise_sigma > 0.0 && self.noise_sigma.is_finite()) {
            return bad(format!("noise_sigma {} must be positive", self.noise_sigma));
        }
        if !(self.objectness_cue >= 0.0 && self.jitter >= 0.0 && self.image_size >= 32.0 && self.feature_scale > 0.0) {
            return bad("objectness_cue and jitter must be >= 0, feature_scale > 0, image_size >= 32".into());
        }
        if self.feature_dim < self.known_classes.len() + self.unknown_classes.len() + 1 {
            return bad(format!(
                "feature_dim {} cannot hold {} orthogonal anchors plus the objectness cue",
                self.feature_dim,
                self.known_classes.len() + self.unknown_classes.len()
            ));
        }
        Ok(())
    }

    /// Length of a raw proposal feature.
    pub fn input_dim(&self) -> usize {
        self.feature_dim + GEOMETRY_CHANNELS
    }

    /// Number of unknown-only images in the test split.
    pub fn wild_test_images(&self) -> usize {
        let r = self.wilderness_ratio;
        (self.images_test as f64 * r / (1.0 + r)).round() as usize
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneObject {
    pub gt: GroundTruthObject,
    pub class_name: String,
    /// Class anchor plus Gaussian noise.
    pub latent: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Proposal {
    pub bbox: Box,
    pub feature: Vec<f64>,
    pub is_object: bool,
    /// Index of the best-overlapping object, when the overlap is non-zero.
    pub target: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScene {
    pub image_id: String,
    pub objects: Vec<SceneObject>,
    pub proposals: Vec<Proposal>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub train: Vec<SyntheticScene>,
    pub test: Vec<SyntheticScene>,
    /// Known classes only, in `known_classes` order; this is what training sees.
    pub embeddings: ClassEmbeddingTable,
    pub known_classes: Vec<String>,
}

impl Dataset {
    pub fn input_dim(&self) -> usize {
        self.train
            .iter()
            .chain(&self.test)
            .flat_map(|s| s.proposals.first())
            .map(|p| p.feature.len())
            .next()
            .unwrap_or(self.embeddings.dim() + GEOMETRY_CHANNELS)
    }

    pub fn test_ground_truth(&self) -> Vec<GroundTruthObject> {
        self.test.iter().flat_map(|s| s.objects.iter().map(|o| o.gt.clone())).collect()
    }
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn project_out(v: &mut [f64], basis: &[Vec<f64>]) {
    // Twice, for accuracy.
    for _ in 0..2 {
        for b in basis {
            let proj: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= proj * y);
        }
    }
}

fn normalized(v: Vec<f64>, floor: f64) -> Option<Vec<f64>> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    (norm > floor).then(|| v.into_iter().map(|x| x / norm).collect())
}

/// Orthonormal basis of the span of the rows of `table`.
fn row_basis(table: &ClassEmbeddingTable) -> Vec<Vec<f64>> {
    let mut basis = Vec::new();
    for row in table.matrix().outer_iter() {
        let mut v = row.to_vec();
        project_out(&mut v, &basis);
        basis.extend(normalized(v, 1e-9));
    }
    basis
}

fn spans_space(table: &ClassEmbeddingTable) -> bool {
    row_basis(table).len() >= table.dim()
}

/// Unit vector orthogonal to every row of `table`.
fn orthogonal_direction(table: &ClassEmbeddingTable, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let basis = row_basis(table);
    loop {
        let mut v: Vec<f64> = (0..table.dim()).map(|_| gaussian(rng)).collect();
        project_out(&mut v, &basis);
        if let Some(u) = normalized(v, 1e-6) {
            return u;
        }
    }
}

struct Generator<'a> {
    spec: &'a DatasetSpec,
    anchors: ClassEmbeddingTable,
    cue: Vec<f64>,
    rng: ChaCha8Rng,
}

impl Generator<'_> {
    fn random_box(&mut self) -> Box {
        let s = self.spec.image_size;
        let w = self.rng.random_range(s / 8.0..s / 2.0);
        let h = self.rng.random_range(s / 8.0..s / 2.0);
        let x = self.rng.random_range(0.0..s - w);
        let y = self.rng.random_range(0.0..s - h);
        Box::new(x, y, x + w, y + h).expect("positive extent")
    }

    fn jittered(&mut self, b: &Box) -> Box {
        let j = self.spec.jitter;
        let c = b.to_center().expect("valid box");
        let cx = c.cx + j * c.w * gaussian(&mut self.rng);
        let cy = c.cy + j * c.h * gaussian(&mut self.rng);
        let w = c.w * (j * gaussian(&mut self.rng)).exp();
        let h = c.h * (j * gaussian(&mut self.rng)).exp();
        Box::new(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0).expect("positive extent")
    }

    fn object(&mut self, image_id: &str, class_name: &str, label: Label) -> SceneObject {
        let anchor = self.anchors.get(class_name).expect("class has an anchor").to_vec();
        let sigma = self.spec.noise_sigma;
        let latent = anchor.iter().map(|a| a + sigma * gaussian(&mut self.rng)).collect();
        SceneObject {
            gt: GroundTruthObject {
                image_id: image_id.to_string(),
                bbox: self.random_box(),
                label,
            },
            class_name: class_name.to_string(),
            latent,
        }
    }

    /// Semantic part scaled by overlap, plus the cue, plus geometry
    /// channels, plus background noise everywhere.
    fn proposal(&mut self, bbox: Box, objects: &[SceneObject]) -> Proposal {
        let best = objects
            .iter()
            .enumerate()
            .map(|(i, o)| (i, iou(&bbox, &o.gt.bbox)))
            .fold(None, |acc: Option<(usize, f64)>, (i, v)| match acc {
                Some((_, bv)) if bv >= v => acc,
                _ => Some((i, v)),
            });
        let target = best.filter(|&(_, v)| v > 0.0);
        let dim = self.spec.feature_dim;
        let sigma = self.spec.noise_sigma;
        let mut feature = vec![0.0; dim + GEOMETRY_CHANNELS];
        if let Some((i, overlap)) = target {
            let o = &objects[i];
            for (f, (l, c)) in feature.iter_mut().zip(o.latent.iter().zip(&self.cue)) {
                *f = overlap * (l + self.spec.objectness_cue * c);
            }
            let gt = o.gt.bbox.to_center().expect("valid box");
            let p = bbox.to_center().expect("valid box");
            feature[dim..].copy_from_slice(&box_deltas(&gt, &p).to_array());
        }
        for f in feature.iter_mut() {
            *f = self.spec.feature_scale * *f + sigma * gaussian(&mut self.rng);
        }
        Proposal {
            bbox,
            feature,
            is_object: target.is_some_and(|(_, v)| v >= POSITIVE_IOU),
            target: target.map(|(i, _)| i),
        }
    }

    fn negative_box(&mut self, objects: &[SceneObject]) -> Option<Box> {
        (0..100)
            .map(|_| self.random_box())
            .find(|b| objects.iter().all(|o| iou(b, &o.gt.bbox) < NEGATIVE_MAX_IOU))
    }

    fn scene(&mut self, image_id: String, classes: &[(String, Label)], training: bool) -> SyntheticScene {
        let (lo, hi) = self.spec.objects_per_image;
        let n = self.rng.random_range(lo..=hi);
        let objects: Vec<SceneObject> = (0..n)
            .map(|_| {
                let (name, label) = &classes[self.rng.random_range(0..classes.len())];
                self.object(&image_id, name, *label)
            })
            .collect();
        let mut boxes = Vec::new();
        for o in &objects {
            if training {
                boxes.push(o.gt.bbox);
                boxes.push(self.jittered(&o.gt.bbox));
            }
            boxes.push(self.jittered(&o.gt.bbox));
        }
        for _ in 0..self.spec.negatives_per_image {
            if let Some(b) = self.negative_box(&objects) {
                boxes.push(b);
            }
        }
        let proposals = boxes.into_iter().map(|b| self.proposal(b, &objects)).collect();
        SyntheticScene {
            image_id,
            objects,
            proposals,
        }
    }
}

/// Builds both splits. Training scenes hold known classes only; the test
/// split has `wild_test_images()` unknown-only scenes followed by
/// known-only scenes.
pub fn generate_dataset(spec: &DatasetSpec) -> Result<Dataset, HarnessError> {
    spec.validate()?;
    let all: Vec<&String> = spec.known_classes.iter().chain(&spec.unknown_classes).collect();
    let anchors = synth_embeddings(&all, spec.feature_dim, spec.seed, &spec.proximity_pairs)?;
    build(spec, anchors)
}

/// Like [`generate_dataset`], but class latents sit on rows of `table`
/// instead of synthesized anchors; `proximity_pairs` is ignored. The table
/// must cover every known and unknown class at `feature_dim` and leave room
/// for a direction orthogonal to all of them.
pub fn generate_dataset_with_embeddings(spec: &DatasetSpec, table: &ClassEmbeddingTable) -> Result<Dataset, HarnessError> {
    spec.validate()?;
    if table.dim() != spec.feature_dim {
        return Err(HarnessError::Spec(format!(
            "embedding dim {} != feature_dim {}",
            table.dim(),
            spec.feature_dim
        )));
    }
    let all: Vec<&String> = spec.known_classes.iter().chain(&spec.unknown_classes).collect();
    let anchors = table.subset(&all)?;
    if spans_space(&anchors) {
        return Err(HarnessError::Spec(
            "class embeddings span the whole feature space; no room for the objectness cue".into(),
        ));
    }
    build(spec, anchors)
}

fn build(spec: &DatasetSpec, anchors: ClassEmbeddingTable) -> Result<Dataset, HarnessError> {
    let embeddings = anchors.subset(&spec.known_classes)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x5eed_da7a);
    let cue = orthogonal_direction(&anchors, &mut rng);
    let mut g = Generator {
        spec,
        anchors,
        cue,
        rng,
    };

    let known: Vec<(String, Label)> = spec
        .known_classes
        .iter()
        .enumerate()
        .map(|(i, c)| (c.clone(), Label::Known(i)))
        .collect();
    let unknown: Vec<(String, Label)> = spec.unknown_classes.iter().map(|c| (c.clone(), Label::Unknown)).collect();

    let train = (0..spec.images_train)
        .map(|i| g.scene(format!("train_{i:05}"), &known, true))
        .collect();
    let wild = spec.wild_test_images();
    let test = (0..spec.images_test)
        .map(|i| {
            let classes = if i < wild { &unknown } else { &known };
            g.scene(format!("test_{i:05}"), classes, false)
        })
        .collect();
    Ok(Dataset {
        train,
        test,
        embeddings,
        known_classes: spec.known_classes.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embeddings::cosine_similarity;

    fn small() -> DatasetSpec {
        DatasetSpec {
            images_train: 20,
            images_test: 10,
            ..DatasetSpec::default()
        }
    }

    #[test]
    fn deterministic() {
        assert_eq!(generate_dataset(&small()).unwrap(), generate_dataset(&small()).unwrap());
        let other = DatasetSpec { seed: 1, ..small() };
        assert_ne!(generate_dataset(&small()).unwrap(), generate_dataset(&other).unwrap());
    }

    #[test]
    fn training_holds_known_classes_only() {
        let d = generate_dataset(&small()).unwrap();
        assert!(d.train.iter().flat_map(|s| &s.objects).all(|o| o.gt.label.is_known()));
        assert_eq!(d.embeddings.names(), &small().known_classes[..]);
    }

    #[test]
    fn wilderness_ratio_zero_has_no_unknowns() {
        let d = generate_dataset(&DatasetSpec { wilderness_ratio: 0.0, ..small() }).unwrap();
        assert!(d.test_ground_truth().iter().all(|g| g.label.is_known()));
    }

    #[test]
    fn wilderness_ratio_one_splits_test_evenly() {
        let d = generate_dataset(&small()).unwrap();
        let wild = d.test.iter().filter(|s| s.objects.iter().all(|o| o.gt.label == Label::Unknown)).count();
        assert_eq!(wild, 5);
    }

    #[test]
    fn proximity_pair_cosine() {
        let spec = DatasetSpec {
            images_test: 1600,
            images_train: 1,
            unknown_classes: vec!["zebra".into()],
            ..DatasetSpec::default()
        };
        let d = generate_dataset(&spec).unwrap();
        let anchor = d.embeddings.get("horse").unwrap().to_vec();
        let cosines: Vec<f64> = d
            .test
            .iter()
            .flat_map(|s| &s.objects)
            .filter(|o| o.class_name == "zebra")
            .map(|o| cosine_similarity(&o.latent, &anchor).unwrap())
            .collect();
        assert!(cosines.len() >= 1000, "{}", cosines.len());
        let mean = cosines.iter().sum::<f64>() / cosines.len() as f64;
        assert!((mean - 0.8).abs() <= 0.1, "mean cosine {mean}");
    }

    #[test]
    fn proposals_are_labeled_consistently() {
        let d = generate_dataset(&small()).unwrap();
        for s in d.train.iter().chain(&d.test) {
            for p in &s.proposals {
                assert_eq!(p.feature.len(), small().input_dim());
                let best = s.objects.iter().map(|o| iou(&p.bbox, &o.gt.bbox)).fold(0.0, f64::max);
                assert_eq!(p.is_object, best >= POSITIVE_IOU);
            }
        }
    }

    #[test]
    fn cue_is_orthogonal_to_paired_anchors() {
        let spec = DatasetSpec::default();
        let all: Vec<&String> = spec.known_classes.iter().chain(&spec.unknown_classes).collect();
        let anchors = synth_embeddings(&all, spec.feature_dim, 3, &spec.proximity_pairs).unwrap();
        let cue = orthogonal_direction(&anchors, &mut ChaCha8Rng::seed_from_u64(1));
        for row in anchors.matrix().outer_iter() {
            let dot: f64 = row.iter().zip(&cue).map(|(a, b)| a * b).sum();
            assert!(dot.abs() < 1e-12, "{dot}");
        }
    }

    #[test]
    fn external_embeddings() {
        let spec = small();
        let all: Vec<&String> = spec.known_classes.iter().chain(&spec.unknown_classes).collect();
        let table = synth_embeddings(&all, spec.feature_dim, spec.seed, &spec.proximity_pairs).unwrap();
        assert_eq!(generate_dataset_with_embeddings(&spec, &table).unwrap(), generate_dataset(&spec).unwrap());

        let missing = table.subset(&spec.known_classes).unwrap();
        assert!(generate_dataset_with_embeddings(&spec, &missing).is_err());

        let tiny = DatasetSpec {
            known_classes: vec!["a".into(), "b".into()],
            unknown_classes: vec!["c".into()],
            feature_dim: 4,
            ..small()
        };
        let full = ClassEmbeddingTable::new(vec![
            ("a".into(), vec![1.0, 0.0, 0.0, 0.0]),
            ("b".into(), vec![0.0, 1.0, 0.0, 0.0]),
            ("c".into(), vec![0.0, 0.0, 1.0, 0.0]),
            ("d".into(), vec![0.0, 0.0, 0.0, 1.0]),
        ])
        .unwrap();
        assert!(generate_dataset_with_embeddings(&tiny, &full).is_ok());
        let wrong_dim = DatasetSpec { feature_dim: 5, ..tiny };
        assert!(generate_dataset_with_embeddings(&wrong_dim, &full).is_err());
    }

    #[test]
    fn invalid_specs_rejected() {
        for spec in [
            DatasetSpec { noise_sigma: 0.0, ..small() },
            DatasetSpec { wilderness_ratio: -1.0, ..small() },
            DatasetSpec { objects_per_image: (0, 2), ..small() },
            DatasetSpec { feature_dim: 8, ..small() },
            DatasetSpec { unknown_classes: vec!["dog".into()], ..small() },
        ] {
            assert!(generate_dataset(&spec).is_err(), "{spec:?}");
        }
    }
}
