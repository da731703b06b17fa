use std::collections::BTreeSet;

use super::{match_class, ClassMatch, Detection, GroundTruthObject, Label};

/// All-points interpolated AP in percent; `None` without ground truth.
fn ap_from_match(m: &ClassMatch) -> Option<f64> {
    if m.num_gt == 0 {
        return None;
    }
    let n_gt = m.num_gt as f64;
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut recall = Vec::with_capacity(m.is_tp.len());
    let mut precision = Vec::with_capacity(m.is_tp.len());
    for &hit in &m.is_tp {
        if hit {
            tp += 1;
        } else {
            fp += 1;
        }
        recall.push(tp as f64 / n_gt);
        precision.push(tp as f64 / (tp + fp) as f64);
    }
    // Monotone envelope: precision at recall r is the best precision at any
    // recall >= r.
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut area = 0.0;
    let mut prev_recall = 0.0;
    for (r, p) in recall.iter().zip(&precision) {
        if *r > prev_recall {
            area += (r - prev_recall) * p;
            prev_recall = *r;
        }
    }
    Some(100.0 * area)
}

pub fn average_precision(dets: &[Detection], gts: &[GroundTruthObject], label: Label, iou_thresh: f64) -> Option<f64> {
    ap_from_match(&match_class(dets, gts, label, iou_thresh))
}

/// AP for every known class that has ground truth, ascending by class.
pub fn per_class_ap(dets: &[Detection], gts: &[GroundTruthObject], iou_thresh: f64) -> Vec<(usize, f64)> {
    let classes: BTreeSet<usize> = gts
        .iter()
        .filter_map(|g| match g.label {
            Label::Known(c) => Some(c),
            Label::Unknown => None,
        })
        .collect();
    classes
        .into_iter()
        .filter_map(|c| average_precision(dets, gts, Label::Known(c), iou_thresh).map(|ap| (c, ap)))
        .collect()
}

/// Mean AP over known classes with ground truth; 0 when there are none.
pub fn map_known(dets: &[Detection], gts: &[GroundTruthObject], iou_thresh: f64) -> f64 {
    let aps = per_class_ap(dets, gts, iou_thresh);
    if aps.is_empty() {
        0.0
    } else {
        aps.iter().map(|(_, ap)| ap).sum::<f64>() / aps.len() as f64
    }
}

/// AP of unknown-labeled detections against unknown ground truth. Known
/// labels on either side play no part.
pub fn ap_unknown(dets: &[Detection], gts: &[GroundTruthObject], iou_thresh: f64) -> Option<f64> {
    average_precision(dets, gts, Label::Unknown, iou_thresh)
}
