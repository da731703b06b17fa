use std::collections::HashMap;

use super::{Detection, GroundTruthObject, Label};
use crate::geometry::iou;

/// Greedy matching outcome for one label.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassMatch {
    /// Indices into the detection slice, highest score first.
    pub order: Vec<usize>,
    /// TP flag per entry of `order`.
    pub is_tp: Vec<bool>,
    /// Matched ground-truth index per entry of `order`.
    pub matched_gt: Vec<Option<usize>>,
    /// Ground-truth objects carrying the label.
    pub num_gt: usize,
}

/// Detection indices carrying `label`, by descending score. The sort is
/// stable, so equal scores keep their input order.
pub(crate) fn ranked(dets: &[Detection], keep: impl Fn(&Detection) -> bool) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).filter(|&i| keep(&dets[i])).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score));
    order
}

pub(crate) fn gts_by_image(gts: &[GroundTruthObject], keep: impl Fn(&GroundTruthObject) -> bool) -> HashMap<&str, Vec<usize>> {
    let mut by_image: HashMap<&str, Vec<usize>> = HashMap::new();
    for (i, g) in gts.iter().enumerate().filter(|(_, g)| keep(g)) {
        by_image.entry(g.image_id.as_str()).or_default().push(i);
    }
    by_image
}

/// Each detection of `label` claims the highest-IoU still-unmatched ground
/// truth of the same label in its image, provided the IoU reaches
/// `iou_thresh`; otherwise it is a false positive.
pub fn match_class(dets: &[Detection], gts: &[GroundTruthObject], label: Label, iou_thresh: f64) -> ClassMatch {
    let order = ranked(dets, |d| d.label == label);
    let candidates = gts_by_image(gts, |g| g.label == label);
    let num_gt = candidates.values().map(Vec::len).sum();
    let mut taken = vec![false; gts.len()];
    let mut is_tp = Vec::with_capacity(order.len());
    let mut matched_gt = Vec::with_capacity(order.len());

    for &di in &order {
        let d = &dets[di];
        let best = candidates
            .get(d.image_id.as_str())
            .into_iter()
            .flatten()
            .filter(|&&gi| !taken[gi])
            .map(|&gi| (gi, iou(&d.bbox, &gts[gi].bbox)))
            .fold(None, |acc: Option<(usize, f64)>, (gi, v)| match acc {
                Some((_, bv)) if bv >= v => acc,
                _ => Some((gi, v)),
            });
        match best {
            Some((gi, v)) if v >= iou_thresh => {
                taken[gi] = true;
                is_tp.push(true);
                matched_gt.push(Some(gi));
            }
            _ => {
                is_tp.push(false);
                matched_gt.push(None);
            }
        }
    }
    ClassMatch {
        order,
        is_tp,
        matched_gt,
        num_gt,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::test_util::*;

    #[test]
    fn single_exact_detection_is_tp() {
        let g = vec![gt("a", bx(0.0, 0.0, 10.0, 10.0), Label::Known(0))];
        let d = vec![det("a", bx(0.0, 0.0, 10.0, 10.0), Label::Known(0), 0.9)];
        let m = match_class(&d, &g, Label::Known(0), 0.5);
        assert_eq!(m.is_tp, vec![true]);
        assert_eq!(m.matched_gt, vec![Some(0)]);
        assert_eq!(m.num_gt, 1);
    }

    #[test]
    fn duplicate_detection_is_fp() {
        let g = vec![gt("a", bx(0.0, 0.0, 10.0, 10.0), Label::Known(0))];
        let d = vec![
            det("a", bx(0.0, 0.0, 10.0, 10.0), Label::Known(0), 0.3),
            det("a", bx(0.0, 0.0, 10.0, 9.0), Label::Known(0), 0.8),
        ];
        let m = match_class(&d, &g, Label::Known(0), 0.5);
        assert_eq!(m.order, vec![1, 0]);
        assert_eq!(m.is_tp, vec![true, false]);
    }

    #[test]
    fn below_threshold_is_fp() {
        // IoU = 4 / 10 = 0.4
        let g = vec![gt("a", bx(0.0, 0.0, 2.0, 3.0), Label::Known(0))];
        let d = vec![det("a", bx(0.0, 1.0, 2.0, 5.0), Label::Known(0), 0.9)];
        assert!((iou(&d[0].bbox, &g[0].bbox) - 0.4).abs() < 1e-12);
        assert_eq!(match_class(&d, &g, Label::Known(0), 0.5).is_tp, vec![false]);
        assert_eq!(match_class(&d, &g, Label::Known(0), 0.4).is_tp, vec![true]);
    }

    #[test]
    fn other_images_and_labels_ignored() {
        let g = vec![
            gt("a", bx(0.0, 0.0, 10.0, 10.0), Label::Known(1)),
            gt("b", bx(0.0, 0.0, 10.0, 10.0), Label::Known(0)),
        ];
        let d = vec![
            det("a", bx(0.0, 0.0, 10.0, 10.0), Label::Known(0), 0.9),
            det("b", bx(0.0, 0.0, 10.0, 10.0), Label::Unknown, 0.9),
        ];
        let m = match_class(&d, &g, Label::Known(0), 0.5);
        assert_eq!(m.order, vec![0]);
        assert_eq!(m.is_tp, vec![false]);
    }

    #[test]
    fn falls_back_to_next_best_unmatched() {
        let g = vec![
            gt("a", bx(0.0, 0.0, 10.0, 10.0), Label::Known(0)),
            gt("a", bx(1.0, 0.0, 11.0, 10.0), Label::Known(0)),
        ];
        let d = vec![
            det("a", bx(0.0, 0.0, 10.0, 10.0), Label::Known(0), 0.9),
            det("a", bx(0.0, 0.0, 10.0, 10.0), Label::Known(0), 0.8),
        ];
        let m = match_class(&d, &g, Label::Known(0), 0.5);
        assert_eq!(m.matched_gt, vec![Some(0), Some(1)]);
    }
}
