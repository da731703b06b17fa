//! Flat `key=value` overrides applied onto library defaults.

use std::fmt;
use std::str::FromStr;

use osod_core::embeddings::SimilarityPair;
use osod_core::harness::{DatasetSpec, ModuleSwitches, TrainConfig};
use osod_core::losses::{Combiner, Reduction};

/// Which groups of keys a command accepts.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Section {
    Data,
    Train,
    Loss,
    Gradcheck,
}

impl Section {
    fn prefix(self) -> &'static str {
        match self {
            Section::Data => "data",
            Section::Train => "train",
            Section::Loss => "loss",
            Section::Gradcheck => "gradcheck",
        }
    }
}

pub const DATA_KEYS: &[&str] = &[
    "known_classes",
    "unknown_classes",
    "feature_dim",
    "objects_min",
    "objects_max",
    "images_train",
    "images_test",
    "wilderness_ratio",
    "noise_sigma",
    "proximity_pairs",
    "objectness_cue",
    "feature_scale",
    "image_size",
    "jitter",
    "negatives_per_image",
    "seed",
];
pub const TRAIN_KEYS: &[&str] = &["learning_rate", "iterations", "batch_images", "switches", "seed"];
pub const LOSS_KEYS: &[&str] = &[
    "alpha1",
    "alpha2",
    "alpha3",
    "centerness_eps",
    "gm_eps",
    "temperature",
    "combiner",
    "reduction",
];
pub const GRADCHECK_KEYS: &[&str] = &["trials"];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OverrideError(pub String);

impl fmt::Display for OverrideError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for OverrideError {}

fn err<T>(msg: String) -> Result<T, OverrideError> {
    Err(OverrideError(msg))
}

/// Parses `key=value` for clap.
pub fn parse_assignment(s: &str) -> Result<(String, String), String> {
    match s.split_once('=') {
        Some((k, v)) if !k.trim().is_empty() => Ok((k.trim().to_string(), v.trim().to_string())),
        _ => Err(format!("expected key=value, got {s:?}")),
    }
}

fn value<T: FromStr>(key: &str, v: &str) -> Result<T, OverrideError> {
    v.parse()
        .map_err(|_| OverrideError(format!("{key}: cannot parse {v:?}")))
}

fn names(v: &str) -> Vec<String> {
    v.split(',').map(str::trim).filter(|s| !s.is_empty()).map(String::from).collect()
}

/// `class:anchor:cosine`, comma-separated; empty means none.
fn pairs(key: &str, v: &str) -> Result<Vec<SimilarityPair>, OverrideError> {
    v.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|p| match p.split(':').collect::<Vec<_>>()[..] {
            [class, anchor, cos] => Ok(SimilarityPair::new(class, anchor, value(key, cos)?)),
            _ => err(format!("{key}: expected class:anchor:cosine, got {p:?}")),
        })
        .collect()
}

/// Settings a command starts from before applying its overrides.
#[derive(Debug, Clone, PartialEq)]
pub struct Settings {
    pub spec: DatasetSpec,
    pub train: TrainConfig,
    pub gradcheck_trials: usize,
}

impl Default for Settings {
    fn default() -> Self {
        Self {
            spec: DatasetSpec::default(),
            train: TrainConfig::default(),
            gradcheck_trials: 20,
        }
    }
}

impl Settings {
    /// Applies `--seed` (to both the dataset and training seeds) and then
    /// each override in order. Keys outside `allowed` are rejected.
    pub fn build(seed: Option<u64>, overrides: &[(String, String)], allowed: &[Section]) -> Result<Self, OverrideError> {
        let mut s = Settings::default();
        if let Some(seed) = seed {
            s.spec.seed = seed;
            s.train.seed = seed;
        }
        for (key, v) in overrides {
            s.apply(key, v, allowed)?;
        }
        Ok(s)
    }

    fn apply(&mut self, key: &str, v: &str, allowed: &[Section]) -> Result<(), OverrideError> {
        let (prefix, name) = key.split_once('.').unwrap_or(("", key));
        let section = [Section::Data, Section::Train, Section::Loss, Section::Gradcheck]
            .into_iter()
            .find(|s| s.prefix() == prefix);
        let known = match section {
            Some(Section::Data) => DATA_KEYS,
            Some(Section::Train) => TRAIN_KEYS,
            Some(Section::Loss) => LOSS_KEYS,
            Some(Section::Gradcheck) => GRADCHECK_KEYS,
            None => &[][..],
        };
        let Some(section) = section.filter(|_| known.contains(&name)) else {
            return err(format!("unknown key {key:?}"));
        };
        if !allowed.contains(&section) {
            return err(format!("key {key:?} does not apply to this command"));
        }
        let spec = &mut self.spec;
        let train = &mut self.train;
        let loss = &mut train.loss;
        match (section, name) {
            (Section::Data, "known_classes") => spec.known_classes = names(v),
            (Section::Data, "unknown_classes") => spec.unknown_classes = names(v),
            (Section::Data, "feature_dim") => spec.feature_dim = value(key, v)?,
            (Section::Data, "objects_min") => spec.objects_per_image.0 = value(key, v)?,
            (Section::Data, "objects_max") => spec.objects_per_image.1 = value(key, v)?,
            (Section::Data, "images_train") => spec.images_train = value(key, v)?,
            (Section::Data, "images_test") => spec.images_test = value(key, v)?,
            (Section::Data, "wilderness_ratio") => spec.wilderness_ratio = value(key, v)?,
            (Section::Data, "noise_sigma") => spec.noise_sigma = value(key, v)?,
            (Section::Data, "proximity_pairs") => spec.proximity_pairs = pairs(key, v)?,
            (Section::Data, "objectness_cue") => spec.objectness_cue = value(key, v)?,
            (Section::Data, "feature_scale") => spec.feature_scale = value(key, v)?,
            (Section::Data, "image_size") => spec.image_size = value(key, v)?,
            (Section::Data, "jitter") => spec.jitter = value(key, v)?,
            (Section::Data, "negatives_per_image") => spec.negatives_per_image = value(key, v)?,
            (Section::Data, "seed") => spec.seed = value(key, v)?,
            (Section::Train, "learning_rate") => train.learning_rate = value(key, v)?,
            (Section::Train, "iterations") => train.iterations = value(key, v)?,
            (Section::Train, "batch_images") => train.batch_images = value(key, v)?,
            (Section::Train, "seed") => train.seed = value(key, v)?,
            (Section::Train, "switches") => {
                train.switches = ModuleSwitches::from_label(v)
                    .ok_or_else(|| OverrideError(format!("{key}: expected e.g. SC+CD+OF or none, got {v:?}")))?
            }
            (Section::Loss, "alpha1") => loss.alpha1 = value(key, v)?,
            (Section::Loss, "alpha2") => loss.alpha2 = value(key, v)?,
            (Section::Loss, "alpha3") => loss.alpha3 = value(key, v)?,
            (Section::Loss, "centerness_eps") => loss.centerness_eps = value(key, v)?,
            (Section::Loss, "gm_eps") => loss.gm_eps = value(key, v)?,
            (Section::Loss, "temperature") => loss.decorrelation_temperature = value(key, v)?,
            (Section::Loss, "combiner") => {
                loss.combiner = Combiner::from_name(v).ok_or_else(|| {
                    let all: Vec<&str> = Combiner::ALL.iter().map(|c| c.name()).collect();
                    OverrideError(format!("{key}: expected one of {}, got {v:?}", all.join(", ")))
                })?
            }
            (Section::Loss, "reduction") => {
                loss.reduction = match v {
                    "mean" => Reduction::Mean,
                    "sum" => Reduction::Sum,
                    _ => return err(format!("{key}: expected mean or sum, got {v:?}")),
                }
            }
            (Section::Gradcheck, "trials") => self.gradcheck_trials = value(key, v)?,
            _ => unreachable!("key lists and match arms agree"),
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn kv(k: &str, v: &str) -> (String, String) {
        (k.into(), v.into())
    }

    const ALL: &[Section] = &[Section::Data, Section::Train, Section::Loss, Section::Gradcheck];

    #[test]
    fn every_listed_key_applies() {
        let samples = [
            ("data.known_classes", "a,b,c"),
            ("data.unknown_classes", "z"),
            ("data.feature_dim", "16"),
            ("data.objects_min", "2"),
            ("data.objects_max", "4"),
            ("data.images_train", "10"),
            ("data.images_test", "5"),
            ("data.wilderness_ratio", "0.5"),
            ("data.noise_sigma", "0.1"),
            ("data.proximity_pairs", "z:a:0.7"),
            ("data.objectness_cue", "0.2"),
            ("data.feature_scale", "3"),
            ("data.image_size", "64"),
            ("data.jitter", "0.2"),
            ("data.negatives_per_image", "2"),
            ("data.seed", "9"),
            ("train.learning_rate", "0.5"),
            ("train.iterations", "7"),
            ("train.batch_images", "2"),
            ("train.switches", "CD"),
            ("train.seed", "8"),
            ("loss.alpha1", "0.2"),
            ("loss.alpha2", "0.3"),
            ("loss.alpha3", "2"),
            ("loss.centerness_eps", "1e-6"),
            ("loss.gm_eps", "1e-9"),
            ("loss.temperature", "0.5"),
            ("loss.combiner", "sum"),
            ("loss.reduction", "sum"),
            ("gradcheck.trials", "3"),
        ];
        let listed = DATA_KEYS.len() + TRAIN_KEYS.len() + LOSS_KEYS.len() + GRADCHECK_KEYS.len();
        assert_eq!(samples.len(), listed);
        let overrides: Vec<_> = samples.iter().map(|(k, v)| kv(k, v)).collect();
        let s = Settings::build(None, &overrides, ALL).unwrap();
        let d = Settings::default();
        assert_ne!(s.spec, d.spec);
        assert_eq!(s.spec.known_classes, vec!["a", "b", "c"]);
        assert_eq!(s.spec.objects_per_image, (2, 4));
        assert_eq!(s.spec.proximity_pairs, vec![SimilarityPair::new("z", "a", 0.7)]);
        assert_eq!(s.train.iterations, 7);
        assert_eq!(s.train.switches, ModuleSwitches::from_label("CD").unwrap());
        assert_eq!(s.train.loss.combiner, Combiner::Sum);
        assert_eq!(s.train.loss.reduction, Reduction::Sum);
        assert_eq!(s.train.loss.decorrelation_temperature, 0.5);
        assert_eq!(s.gradcheck_trials, 3);
    }

    #[test]
    fn seed_then_overrides() {
        let s = Settings::build(Some(7), &[kv("train.seed", "3")], ALL).unwrap();
        assert_eq!((s.spec.seed, s.train.seed), (7, 3));
        let s = Settings::build(None, &[kv("data.proximity_pairs", "")], ALL).unwrap();
        assert!(s.spec.proximity_pairs.is_empty());
    }

    #[test]
    fn rejections() {
        for (k, v) in [
            ("data.bogus", "1"),
            ("bogus", "1"),
            ("alpha1", "1"),
            ("data.feature_dim", "many"),
            ("train.switches", "XY"),
            ("loss.combiner", "median"),
            ("loss.reduction", "max"),
            ("data.proximity_pairs", "z:a"),
        ] {
            assert!(Settings::build(None, &[kv(k, v)], ALL).is_err(), "{k}={v}");
        }
        assert!(Settings::build(None, &[kv("loss.alpha1", "1")], &[Section::Data]).is_err());
    }

    #[test]
    fn assignment_syntax() {
        assert_eq!(parse_assignment("a.b = 1").unwrap(), kv("a.b", "1"));
        assert_eq!(parse_assignment("k=").unwrap(), kv("k", ""));
        assert!(parse_assignment("novalue").is_err());
        assert!(parse_assignment("=1").is_err());
    }
}
