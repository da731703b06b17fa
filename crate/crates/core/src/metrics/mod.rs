//! Open-set detection evaluation.
//!
//! Matching follows the PASCAL VOC greedy convention: detections of a class
//! are visited in descending score order and each claims the highest-IoU
//! unmatched ground truth of that class in its image. AP is the all-points
//! interpolated area under the precision/recall curve, in percent.

mod ap;
mod entropy;
mod matching;
mod open_set;
pub mod records;

use thiserror::Error;

use crate::geometry::Box;

pub use ap::{ap_unknown, average_precision, map_known, per_class_ap};
pub use entropy::{entropy_threshold, shannon_entropy};
pub use matching::{match_class, ClassMatch};
pub use open_set::{aose, wilderness_impact};

pub const DEFAULT_IOU_THRESHOLD: f64 = 0.5;
pub const DEFAULT_RECALL_LEVEL: f64 = 0.8;
pub const DEFAULT_ENTROPY_THRESHOLD: f64 = 0.85;
/// Known-class detections below this score never count toward AOSE.
pub const AOSE_SCORE_FLOOR: f64 = 0.05;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MetricsError {
    #[error("detection {index} has no class probabilities; entropy thresholding needs them")]
    MissingProbabilities { index: usize },
    #[error("invalid detection {index}: {message}")]
    InvalidDetection { index: usize, message: String },
    #[error("invalid option: {0}")]
    InvalidOption(String),
    #[error("undefined result: {0}")]
    Undefined(String),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
}

/// A known-class index or the single open-set label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Label {
    Known(usize),
    Unknown,
}

impl Label {
    pub fn is_known(self) -> bool {
        matches!(self, Label::Known(_))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub image_id: String,
    pub bbox: Box,
    pub label: Label,
    pub score: f64,
    /// Distribution over the k known classes plus the trailing unknown slot.
    pub class_probs: Option<Vec<f64>>,
}

impl Detection {
    pub fn validate(&self, index: usize) -> Result<(), MetricsError> {
        let invalid = |message: String| MetricsError::InvalidDetection { index, message };
        if !(0.0..=1.0).contains(&self.score) {
            return Err(invalid(format!("score {} outside [0, 1]", self.score)));
        }
        self.bbox.validate().map_err(|e| invalid(e.to_string()))?;
        if let Some(p) = &self.class_probs {
            if p.iter().any(|&v| !(v >= 0.0)) {
                return Err(invalid("class probabilities must be non-negative".into()));
            }
            let total: f64 = p.iter().sum();
            if (total - 1.0).abs() > 1e-6 {
                return Err(invalid(format!("class probabilities sum to {total}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruthObject {
    pub image_id: String,
    pub bbox: Box,
    pub label: Label,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalOptions {
    pub iou_thresh: f64,
    pub recall_level: f64,
    /// `None` disables entropy thresholding.
    pub entropy_threshold: Option<f64>,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            iou_thresh: DEFAULT_IOU_THRESHOLD,
            recall_level: DEFAULT_RECALL_LEVEL,
            entropy_threshold: None,
        }
    }
}

impl EvalOptions {
    pub fn validate(&self) -> Result<(), MetricsError> {
        if !(self.iou_thresh > 0.0 && self.iou_thresh <= 1.0) {
            return Err(MetricsError::InvalidOption(format!("iou threshold {} not in (0, 1]", self.iou_thresh)));
        }
        if !(self.recall_level > 0.0 && self.recall_level <= 1.0) {
            return Err(MetricsError::InvalidOption(format!("recall level {} not in (0, 1]", self.recall_level)));
        }
        if let Some(t) = self.entropy_threshold {
            if t.is_nan() {
                return Err(MetricsError::InvalidOption("entropy threshold is NaN".into()));
            }
        }
        Ok(())
    }
}

/// One evaluation run. AP values are percentages.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    /// Known classes with at least one ground-truth object, in class order.
    pub per_class_ap: Vec<(String, f64)>,
    pub map_k: f64,
    pub ap_u: f64,
    pub wi: f64,
    pub aose: usize,
    pub hmp: f64,
    /// Conventions applied (no unknown ground truth, undefined WI, ...).
    pub notes: Vec<String>,
}

/// Harmonic mean of known and unknown precision; 0 when both are 0.
pub fn hmp(map_k: f64, ap_u: f64) -> f64 {
    let denom = map_k + ap_u;
    if denom <= 0.0 {
        0.0
    } else {
        2.0 * map_k * ap_u / denom
    }
}

/// Applies entropy thresholding (when configured), then computes every
/// report field.
pub fn evaluate(
    dets: &[Detection],
    gts: &[GroundTruthObject],
    class_names: &[String],
    opts: &EvalOptions,
) -> Result<EvalReport, MetricsError> {
    opts.validate()?;
    for (i, d) in dets.iter().enumerate() {
        d.validate(i)?;
        if let Label::Known(c) = d.label {
            if c >= class_names.len() {
                return Err(MetricsError::InvalidDetection {
                    index: i,
                    message: format!("class index {c} outside the {} known classes", class_names.len()),
                });
            }
        }
    }
    if let Some(g) = gts.iter().find(|g| matches!(g.label, Label::Known(c) if c >= class_names.len())) {
        return Err(MetricsError::InvalidOption(format!("ground truth label {:?} has no class name", g.label)));
    }

    let relabeled;
    let dets = match opts.entropy_threshold {
        Some(t) => {
            relabeled = entropy_threshold(dets, t)?;
            &relabeled[..]
        }
        None => dets,
    };

    let mut notes = Vec::new();
    let per_class = per_class_ap(dets, gts, opts.iou_thresh);
    let map_k = if per_class.is_empty() {
        notes.push("no known ground truth: mAP_k reported as 0".to_string());
        0.0
    } else {
        per_class.iter().map(|(_, ap)| ap).sum::<f64>() / per_class.len() as f64
    };
    let ap_u = ap_unknown(dets, gts, opts.iou_thresh).unwrap_or_else(|| {
        notes.push("no unknown ground truth: AP_u reported as 0".to_string());
        0.0
    });
    let wi = match wilderness_impact(dets, gts, opts.recall_level, opts.iou_thresh) {
        Ok(v) => v,
        Err(MetricsError::Undefined(why)) => {
            notes.push(format!("WI undefined ({why}): reported as 0"));
            0.0
        }
        Err(e) => return Err(e),
    };
    let aose = aose(dets, gts, opts.iou_thresh);
    Ok(EvalReport {
        per_class_ap: per_class
            .into_iter()
            .map(|(c, ap)| (class_names[c].clone(), ap))
            .collect(),
        map_k,
        ap_u,
        wi,
        aose,
        hmp: hmp(map_k, ap_u),
        notes,
    })
}


#[cfg(test)]
mod tests {
    use super::test_util::*;
    use super::*;
    use proptest::prelude::*;

    fn names(k: usize) -> Vec<String> {
        (0..k).map(|i| format!("c{i}")).collect()
    }

    #[test]
    fn hmp_printed_values() {
        assert!((hmp(58.52, 18.45) - 28.05).abs() <= 0.01);
        assert!((hmp(58.75, 14.93) - 23.81).abs() <= 0.01);
        assert!((hmp(56.10, 12.56) - 20.52).abs() <= 0.01);
        assert_eq!(hmp(42.0, 0.0), 0.0);
        assert_eq!(hmp(0.0, 0.0), 0.0);
    }

    proptest! {
        #[test]
        fn hmp_properties(a in 0.0..100.0f64, b in 0.0..100.0f64) {
            prop_assert!((hmp(a, b) - hmp(b, a)).abs() < 1e-12);
            prop_assert!(hmp(a, b) <= 2.0 * a.min(b) + 1e-12);
            prop_assert!((hmp(a, a) - a).abs() < 1e-9);
        }
    }

    #[test]
    fn empty_detection_set() {
        let gts = vec![gt("a", bx(0.0, 0.0, 10.0, 10.0), Label::Known(0)), gt("b", bx(0.0, 0.0, 5.0, 5.0), Label::Unknown)];
        let r = evaluate(&[], &gts, &names(1), &EvalOptions::default()).unwrap();
        assert_eq!((r.map_k, r.ap_u, r.hmp, r.aose, r.wi), (0.0, 0.0, 0.0, 0, 0.0));
        assert_eq!(r.per_class_ap, vec![("c0".to_string(), 0.0)]);
    }

    #[test]
    fn perfect_closed_set() {
        let gts = vec![
            gt("a", bx(0.0, 0.0, 10.0, 10.0), Label::Known(0)),
            gt("a", bx(20.0, 20.0, 30.0, 30.0), Label::Known(1)),
            gt("b", bx(5.0, 5.0, 9.0, 9.0), Label::Known(1)),
        ];
        let dets: Vec<Detection> = gts.iter().map(|g| det(&g.image_id, g.bbox, g.label, 0.9)).collect();
        let r = evaluate(&dets, &gts, &names(2), &EvalOptions::default()).unwrap();
        assert_eq!(r.map_k, 100.0);
        assert_eq!(r.wi, 0.0);
        assert_eq!(r.aose, 0);
        assert_eq!(r.ap_u, 0.0);
        assert!(r.notes.iter().any(|n| n.contains("no unknown ground truth")));
    }

    #[test]
    fn entropy_threshold_applied_first() {
        let gts = vec![gt("a", bx(0.0, 0.0, 10.0, 10.0), Label::Unknown)];
        let mut d = det("a", bx(0.0, 0.0, 10.0, 10.0), Label::Known(0), 0.34);
        d.class_probs = Some(vec![1.0 / 3.0; 3]);
        let without = evaluate(std::slice::from_ref(&d), &gts, &names(2), &EvalOptions::default()).unwrap();
        assert_eq!((without.aose, without.ap_u), (1, 0.0));
        let opts = EvalOptions { entropy_threshold: Some(0.85), ..EvalOptions::default() };
        let with = evaluate(&[d], &gts, &names(2), &opts).unwrap();
        assert_eq!((with.aose, with.ap_u), (0, 100.0));
    }

    #[test]
    fn invalid_inputs_rejected() {
        let gts = vec![gt("a", bx(0.0, 0.0, 10.0, 10.0), Label::Known(0))];
        let bad_score = det("a", bx(0.0, 0.0, 1.0, 1.0), Label::Known(0), 1.5);
        assert!(evaluate(&[bad_score], &gts, &names(1), &EvalOptions::default()).is_err());
        let bad_label = det("a", bx(0.0, 0.0, 1.0, 1.0), Label::Known(3), 0.5);
        assert!(evaluate(&[bad_label], &gts, &names(1), &EvalOptions::default()).is_err());
        let mut bad_probs = det("a", bx(0.0, 0.0, 1.0, 1.0), Label::Known(0), 0.5);
        bad_probs.class_probs = Some(vec![0.5, 0.6]);
        assert!(evaluate(&[bad_probs], &gts, &names(1), &EvalOptions::default()).is_err());
        let opts = EvalOptions { iou_thresh: 0.0, ..EvalOptions::default() };
        assert!(evaluate(&[], &gts, &names(1), &opts).is_err());
    }
}
