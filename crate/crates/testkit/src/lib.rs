//! Test support: a brute-force reference for the evaluation metrics and a
//! generator of small random detection instances.
//!
//! The reference deliberately shares no code with `osod_core::metrics` or
//! `osod_core::geometry::iou`: it recomputes overlaps from corners, re-sorts
//! by repeated selection, and rescans every ground truth for every
//! detection.

use osod_core::geometry::Box;
use osod_core::metrics::{Detection, GroundTruthObject, Label};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn reference_iou(a: &Box, b: &Box) -> f64 {
    let w = a.x2.min(b.x2) - a.x1.max(b.x1);
    let h = a.y2.min(b.y2) - a.y1.max(b.y1);
    if w <= 0.0 || h <= 0.0 {
        return 0.0;
    }
    let inter = w * h;
    let union = (a.x2 - a.x1) * (a.y2 - a.y1) + (b.x2 - b.x1) * (b.y2 - b.y1) - inter;
    (inter / union).clamp(0.0, 1.0)
}

pub fn reference_entropy(p: &[f64]) -> f64 {
    let mut h = 0.0;
    for &v in p {
        if v > 0.0 {
            h += v * v.ln();
        }
    }
    -h
}

/// Indices of detections passing `keep`, highest score first, ties by
/// position, found by repeated selection.
fn selection_order(dets: &[Detection], keep: impl Fn(&Detection) -> bool) -> Vec<usize> {
    let mut left: Vec<usize> = (0..dets.len()).filter(|&i| keep(&dets[i])).collect();
    let mut out = Vec::new();
    while !left.is_empty() {
        let mut best = 0;
        for j in 1..left.len() {
            if dets[left[j]].score > dets[left[best]].score {
                best = j;
            }
        }
        out.push(left.remove(best));
    }
    out
}

/// Greedy matching of `label`: (detection index, is TP) in ranked order,
/// plus the ground-truth count.
fn reference_match(dets: &[Detection], gts: &[GroundTruthObject], label: Label, thr: f64) -> (Vec<(usize, bool)>, usize) {
    let n_gt = gts.iter().filter(|g| g.label == label).count();
    let mut used = vec![false; gts.len()];
    let mut out = Vec::new();
    for di in selection_order(dets, |d| d.label == label) {
        let d = &dets[di];
        let mut best: Option<usize> = None;
        let mut best_iou = -1.0;
        for (gi, g) in gts.iter().enumerate() {
            if used[gi] || g.label != label || g.image_id != d.image_id {
                continue;
            }
            let v = reference_iou(&d.bbox, &g.bbox);
            if v > best_iou {
                best_iou = v;
                best = Some(gi);
            }
        }
        let hit = match best {
            Some(gi) if best_iou >= thr => {
                used[gi] = true;
                true
            }
            _ => false,
        };
        out.push((di, hit));
    }
    (out, n_gt)
}

fn reference_ap(flags: &[(usize, bool)], n_gt: usize) -> Option<f64> {
    if n_gt == 0 {
        return None;
    }
    let mut rec = Vec::new();
    let mut prec = Vec::new();
    for i in 0..flags.len() {
        let tp = flags[..=i].iter().filter(|f| f.1).count();
        rec.push(tp as f64 / n_gt as f64);
        prec.push(tp as f64 / (i + 1) as f64);
    }
    let mut area = 0.0;
    let mut prev = 0.0;
    for i in 0..rec.len() {
        if rec[i] > prev {
            let best = prec[i..].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            area += (rec[i] - prev) * best;
            prev = rec[i];
        }
    }
    Some(100.0 * area)
}

fn reference_wi(dets: &[Detection], gts: &[GroundTruthObject], classes: &[usize], level: f64, thr: f64) -> Option<f64> {
    let mut pk = Vec::new();
    let mut pku = Vec::new();
    for &c in classes {
        let (flags, n_gt) = reference_match(dets, gts, Label::Known(c), thr);
        for n in 1..=flags.len() {
            let prefix = &flags[..n];
            let tp = prefix.iter().filter(|f| f.1).count();
            if (tp as f64 / n_gt as f64) < level {
                continue;
            }
            let mut fp_k = 0;
            let mut fp_u = 0;
            for &(di, hit) in prefix {
                if hit {
                    continue;
                }
                let d = &dets[di];
                let mut known = 0.0f64;
                let mut unknown = 0.0f64;
                for g in gts.iter().filter(|g| g.image_id == d.image_id) {
                    let v = reference_iou(&d.bbox, &g.bbox);
                    if g.label == Label::Unknown {
                        unknown = unknown.max(v);
                    } else {
                        known = known.max(v);
                    }
                }
                if unknown >= thr && unknown >= known {
                    fp_u += 1;
                } else {
                    fp_k += 1;
                }
            }
            pk.push(tp as f64 / (tp + fp_k) as f64);
            pku.push(tp as f64 / (tp + fp_k + fp_u) as f64);
            break;
        }
    }
    if pk.is_empty() {
        return None;
    }
    let n = pk.len() as f64;
    let mean_k = pk.iter().sum::<f64>() / n;
    let mean_ku = pku.iter().sum::<f64>() / n;
    Some((mean_k / mean_ku - 1.0) * 100.0)
}

fn reference_aose(dets: &[Detection], gts: &[GroundTruthObject], thr: f64) -> usize {
    let mut used = vec![false; gts.len()];
    let mut count = 0;
    for di in selection_order(dets, |d| d.label != Label::Unknown && d.score >= 0.05) {
        let d = &dets[di];
        let mut best: Option<usize> = None;
        let mut best_iou = -1.0;
        for (gi, g) in gts.iter().enumerate() {
            if used[gi] || g.label != Label::Unknown || g.image_id != d.image_id {
                continue;
            }
            let v = reference_iou(&d.bbox, &g.bbox);
            if v > best_iou {
                best_iou = v;
                best = Some(gi);
            }
        }
        if let Some(gi) = best {
            if best_iou >= thr {
                used[gi] = true;
                count += 1;
            }
        }
    }
    count
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceReport {
    /// (class index, AP) for known classes with ground truth.
    pub per_class_ap: Vec<(usize, f64)>,
    pub map_k: f64,
    /// `None` without unknown ground truth.
    pub ap_u: Option<f64>,
    /// `None` when no class reaches the recall level.
    pub wi: Option<f64>,
    pub aose: usize,
    pub hmp: f64,
}

pub fn reference_evaluate(
    dets: &[Detection],
    gts: &[GroundTruthObject],
    iou_thresh: f64,
    recall_level: f64,
    entropy_threshold: Option<f64>,
) -> ReferenceReport {
    let mut dets = dets.to_vec();
    if let Some(t) = entropy_threshold {
        for d in &mut dets {
            let p = d.class_probs.as_ref().expect("reference needs class probabilities");
            if reference_entropy(p) > t {
                d.label = Label::Unknown;
            }
        }
    }
    let mut classes: Vec<usize> = Vec::new();
    for g in gts {
        if let Label::Known(c) = g.label {
            if !classes.contains(&c) {
                classes.push(c);
            }
        }
    }
    classes.sort();
    let mut per_class_ap = Vec::new();
    for &c in &classes {
        let (flags, n) = reference_match(&dets, gts, Label::Known(c), iou_thresh);
        per_class_ap.push((c, reference_ap(&flags, n).expect("class has ground truth")));
    }
    let map_k = if per_class_ap.is_empty() {
        0.0
    } else {
        per_class_ap.iter().map(|p| p.1).sum::<f64>() / per_class_ap.len() as f64
    };
    let (uflags, un) = reference_match(&dets, gts, Label::Unknown, iou_thresh);
    let ap_u = reference_ap(&uflags, un);
    let u = ap_u.unwrap_or(0.0);
    let hmp = if map_k + u == 0.0 { 0.0 } else { 2.0 * map_k * u / (map_k + u) };
    ReferenceReport {
        per_class_ap,
        map_k,
        ap_u,
        wi: reference_wi(&dets, gts, &classes, recall_level, iou_thresh),
        aose: reference_aose(&dets, gts, iou_thresh),
        hmp,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Instance {
    pub detections: Vec<Detection>,
    pub ground_truth: Vec<GroundTruthObject>,
    pub class_names: Vec<String>,
}

/// At most `max_images` images and `max_dets` detections. Coordinates sit
/// on a coarse grid and scores on a few levels, so overlaps, exact IoU ties
/// and score ties are common. Every detection carries a distribution over
/// the known classes plus the unknown slot.
pub fn random_instance(seed: u64, max_images: usize, max_dets: usize) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = rng.random_range(1..=3usize);
    let images = rng.random_range(1..=max_images);
    let grid_box = |rng: &mut ChaCha8Rng| {
        let x = 5.0 * rng.random_range(0..8) as f64;
        let y = 5.0 * rng.random_range(0..8) as f64;
        let w = 5.0 * rng.random_range(1..5) as f64;
        let h = 5.0 * rng.random_range(1..5) as f64;
        Box::new(x, y, x + w, y + h).expect("positive extent")
    };
    let label = |rng: &mut ChaCha8Rng| {
        if rng.random_bool(0.3) {
            Label::Unknown
        } else {
            Label::Known(rng.random_range(0..k))
        }
    };
    let image_id = |rng: &mut ChaCha8Rng| format!("img{}", rng.random_range(0..images));

    let n_gt = rng.random_range(0..=6);
    let mut ground_truth = Vec::new();
    for _ in 0..n_gt {
        ground_truth.push(GroundTruthObject {
            image_id: image_id(&mut rng),
            bbox: grid_box(&mut rng),
            label: label(&mut rng),
        });
    }
    let scores = [0.03, 0.1, 0.3, 0.5, 0.5, 0.7, 0.9, 1.0];
    let n_det = rng.random_range(0..=max_dets);
    let mut detections = Vec::new();
    for _ in 0..n_det {
        // Most detections are perturbed copies of a ground truth, half of those
        // with its label.
        let (img, bbox, inherited) = match ground_truth.len() {
            n if n > 0 && rng.random_bool(0.75) => {
                let g: &GroundTruthObject = &ground_truth[rng.random_range(0..n)];
                let dx = 5.0 * rng.random_range(-1..=1) as f64;
                let bbox = Box::new(g.bbox.x1 + dx, g.bbox.y1, g.bbox.x2 + dx, g.bbox.y2).expect("shifted");
                (g.image_id.clone(), bbox, rng.random_bool(0.5).then_some(g.label))
            }
            _ => (image_id(&mut rng), grid_box(&mut rng), None),
        };
        let raw: Vec<f64> = (0..=k).map(|_| rng.random_range(0.01..1.0f64).powi(3)).collect();
        let total: f64 = raw.iter().sum();
        detections.push(Detection {
            image_id: img,
            bbox,
            label: inherited.unwrap_or_else(|| label(&mut rng)),
            score: scores[rng.random_range(0..scores.len())],
            class_probs: Some(raw.iter().map(|v| v / total).collect()),
        });
    }
    Instance {
        detections,
        ground_truth,
        class_names: (0..k).map(|i| format!("class{i}")).collect(),
    }
}
