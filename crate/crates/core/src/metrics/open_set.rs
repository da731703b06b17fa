use super::matching::{gts_by_image, ranked};
use super::{match_class, Detection, GroundTruthObject, Label, MetricsError, AOSE_SCORE_FLOOR};
use crate::geometry::iou;

/// A known-class false positive counts against the unknowns when its
/// best-overlapping ground truth in the image is unknown (ties go to the
/// unknown side) and that overlap reaches `iou_thresh`.
fn hits_unknown(det: &Detection, gts: &[GroundTruthObject], image_gts: &[usize], iou_thresh: f64) -> bool {
    let (mut best_known, mut best_unknown) = (0.0f64, 0.0f64);
    for &gi in image_gts {
        let v = iou(&det.bbox, &gts[gi].bbox);
        match gts[gi].label {
            Label::Unknown => best_unknown = best_unknown.max(v),
            Label::Known(_) => best_known = best_known.max(v),
        }
    }
    best_unknown >= iou_thresh && best_unknown >= best_known
}

/// Relative precision drop caused by unknown objects, in percent, measured
/// where each known class first reaches `recall_level`. P_k and P_{k∪u} are
/// averaged over classes before the ratio is taken. Classes that never reach
/// the level are skipped; if all are, the result is undefined.
pub fn wilderness_impact(
    dets: &[Detection],
    gts: &[GroundTruthObject],
    recall_level: f64,
    iou_thresh: f64,
) -> Result<f64, MetricsError> {
    let all_by_image = gts_by_image(gts, |_| true);
    let mut classes: Vec<usize> = gts
        .iter()
        .filter_map(|g| match g.label {
            Label::Known(c) => Some(c),
            Label::Unknown => None,
        })
        .collect();
    classes.sort_unstable();
    classes.dedup();

    let (mut sum_pk, mut sum_pku, mut counted) = (0.0, 0.0, 0usize);
    for c in classes {
        let m = match_class(dets, gts, Label::Known(c), iou_thresh);
        let (mut tp, mut fp_k, mut fp_u) = (0usize, 0usize, 0usize);
        for (&di, &hit) in m.order.iter().zip(&m.is_tp) {
            if hit {
                tp += 1;
            } else {
                let d = &dets[di];
                let image_gts = all_by_image.get(d.image_id.as_str()).map(Vec::as_slice).unwrap_or(&[]);
                if hits_unknown(d, gts, image_gts, iou_thresh) {
                    fp_u += 1;
                } else {
                    fp_k += 1;
                }
            }
            if tp as f64 / m.num_gt as f64 >= recall_level {
                sum_pk += tp as f64 / (tp + fp_k) as f64;
                sum_pku += tp as f64 / (tp + fp_k + fp_u) as f64;
                counted += 1;
                break;
            }
        }
    }
    if counted == 0 {
        return Err(MetricsError::Undefined(format!(
            "no known class reaches recall {recall_level}"
        )));
    }
    let n = counted as f64;
    Ok(((sum_pk / n) / (sum_pku / n) - 1.0) * 100.0)
}

/// Number of unknown ground-truth objects claimed by known-class detections
/// scoring at least [`AOSE_SCORE_FLOOR`]; greedy by score, each object at
/// most once.
pub fn aose(dets: &[Detection], gts: &[GroundTruthObject], iou_thresh: f64) -> usize {
    let order = ranked(dets, |d| d.label.is_known() && d.score >= AOSE_SCORE_FLOOR);
    let unknown_by_image = gts_by_image(gts, |g| g.label == Label::Unknown);
    let mut taken = vec![false; gts.len()];
    let mut count = 0;
    for di in order {
        let d = &dets[di];
        let Some(cands) = unknown_by_image.get(d.image_id.as_str()) else {
            continue;
        };
        let mut best: Option<(usize, f64)> = None;
        for &gi in cands.iter().filter(|&&gi| !taken[gi]) {
            let v = iou(&d.bbox, &gts[gi].bbox);
            if best.is_none_or(|(_, bv)| v > bv) {
                best = Some((gi, v));
            }
        }
        if let Some((gi, v)) = best {
            if v >= iou_thresh {
                taken[gi] = true;
                count += 1;
            }
        }
    }
    count
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::test_util::*;

    #[test]
    fn no_unknown_gt_gives_zero() {
        let g = vec![
            gt("a", bx(0.0, 0.0, 10.0, 10.0), Label::Known(0)),
            gt("a", bx(20.0, 0.0, 30.0, 10.0), Label::Known(0)),
        ];
        let d = vec![
            det("a", bx(0.0, 0.0, 10.0, 10.0), Label::Known(0), 0.9),
            det("a", bx(50.0, 0.0, 60.0, 10.0), Label::Known(0), 0.8),
            det("a", bx(20.0, 0.0, 30.0, 10.0), Label::Known(0), 0.7),
        ];
        assert_eq!(wilderness_impact(&d, &g, 0.8, 0.5).unwrap(), 0.0);
        assert_eq!(aose(&d, &g, 0.5), 0);
    }

    #[test]
    fn unknown_fp_before_recall_point() {
        let g = vec![
            gt("a", bx(0.0, 0.0, 10.0, 10.0), Label::Known(0)),
            gt("a", bx(20.0, 0.0, 30.0, 10.0), Label::Known(0)),
            gt("b", bx(0.0, 0.0, 10.0, 10.0), Label::Unknown),
        ];
        let d = vec![
            det("a", bx(0.0, 0.0, 10.0, 10.0), Label::Known(0), 0.9),
            det("b", bx(0.0, 0.0, 10.0, 10.0), Label::Known(0), 0.8),
            det("a", bx(50.0, 0.0, 60.0, 10.0), Label::Known(0), 0.75),
            det("a", bx(20.0, 0.0, 30.0, 10.0), Label::Known(0), 0.7),
        ];
        // At recall 1: TP 2, FP_k 1, FP_u 1 → P_k 2/3, P_ku 1/2.
        let wi = wilderness_impact(&d, &g, 0.8, 0.5).unwrap();
        assert!((wi - ((2.0 / 3.0) / 0.5 - 1.0) * 100.0).abs() < 1e-12);
        assert_eq!(aose(&d, &g, 0.5), 1);
    }

    #[test]
    fn unreachable_recall_is_undefined() {
        let g = vec![gt("a", bx(0.0, 0.0, 10.0, 10.0), Label::Known(0))];
        assert!(matches!(wilderness_impact(&[], &g, 0.8, 0.5), Err(MetricsError::Undefined(_))));
    }

    #[test]
    fn aose_single_match_rule_and_floor() {
        let g = vec![gt("a", bx(0.0, 0.0, 10.0, 10.0), Label::Unknown)];
        let one = vec![det("a", bx(0.0, 0.0, 10.0, 9.0), Label::Known(1), 0.8)];
        assert_eq!(aose(&one, &g, 0.5), 1);
        let two = vec![one[0].clone(), det("a", bx(0.0, 0.0, 10.0, 10.0), Label::Known(0), 0.6)];
        assert_eq!(aose(&two, &g, 0.5), 1);
        let low = vec![det("a", bx(0.0, 0.0, 10.0, 10.0), Label::Known(0), 0.04)];
        assert_eq!(aose(&low, &g, 0.5), 0);
        let unk = vec![det("a", bx(0.0, 0.0, 10.0, 10.0), Label::Unknown, 0.9)];
        assert_eq!(aose(&unk, &g, 0.5), 0);
    }
}
