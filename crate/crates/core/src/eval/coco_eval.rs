//! COCO-protocol average precision and recall.

use serde::Serialize;

use crate::detector::Detection;
use crate::geometry::overlap_metrics;
use crate::synth::Annotation;

pub const SMALL_AREA: f32 = 32.0 * 32.0;
pub const LARGE_AREA: f32 = 96.0 * 96.0;
const RECALL_POINTS: usize = 101;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AreaRange {
    All,
    Small,
    Medium,
    Large,
}

impl AreaRange {
    pub fn contains(&self, area: f32) -> bool {
        match self {
            AreaRange::All => true,
            AreaRange::Small => area < SMALL_AREA,
            AreaRange::Medium => (SMALL_AREA..LARGE_AREA).contains(&area),
            AreaRange::Large => area >= LARGE_AREA,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct EvalResult {
    pub map: f64,
    pub ap50: f64,
    pub ap75: f64,
    pub ap_small: f64,
    pub ap_medium: f64,
    pub ap_large: f64,
    pub ar1: f64,
    pub ar10: f64,
    pub ar100: f64,
    /// AP over all thresholds for each class; classes without GT are 0.
    pub per_class_ap: Vec<f64>,
}

pub fn coco_thresholds() -> Vec<f32> {
    (0..10).map(|i| 0.5 + 0.05 * i as f32).collect()
}

/// Result for one (image, class): matched flags per threshold and ignore flags.
struct ImageEval {
    scores: Vec<f32>,
    /// `[threshold][det]`
    matched: Vec<Vec<bool>>,
    det_ignored: Vec<Vec<bool>>,
    num_gt: usize,
}

fn evaluate_image(dets: &[&Detection], gts: &[&Annotation], area: AreaRange, max_dets: usize, thresholds: &[f32]) -> ImageEval {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score).then(a.cmp(&b)));
    order.truncate(max_dets);
    let dets: Vec<&Detection> = order.iter().map(|&i| dets[i]).collect();

    // non-ignored GTs first, as in the reference implementation
    let mut gt_order: Vec<usize> = (0..gts.len()).collect();
    gt_order.sort_by_key(|&g| !area.contains(gts[g].bbox.area()));
    let gts: Vec<&Annotation> = gt_order.iter().map(|&i| gts[i]).collect();
    let gt_ignored: Vec<bool> = gts.iter().map(|g| !area.contains(g.bbox.area())).collect();
    let num_gt = gt_ignored.iter().filter(|i| !**i).count();

    let ious: Vec<Vec<f32>> = dets
        .iter()
        .map(|d| gts.iter().map(|g| overlap_metrics(&d.bbox, &g.bbox).iou).collect())
        .collect();

    let mut matched = Vec::with_capacity(thresholds.len());
    let mut det_ignored = Vec::with_capacity(thresholds.len());
    for &t in thresholds {
        let mut gt_taken = vec![false; gts.len()];
        let mut m = vec![false; dets.len()];
        let mut ign = vec![false; dets.len()];
        for (d, det) in dets.iter().enumerate() {
            let mut best_iou = t.min(1.0 - 1e-10);
            let mut best: Option<usize> = None;
            for g in 0..gts.len() {
                if gt_taken[g] {
                    continue;
                }
                if let Some(b) = best {
                    if !gt_ignored[b] && gt_ignored[g] {
                        break;
                    }
                }
                if ious[d][g] < best_iou {
                    continue;
                }
                best_iou = ious[d][g];
                best = Some(g);
            }
            match best {
                Some(g) => {
                    gt_taken[g] = true;
                    m[d] = true;
                    ign[d] = gt_ignored[g];
                }
                None => ign[d] = !area.contains(det.bbox.area()),
            }
        }
        matched.push(m);
        det_ignored.push(ign);
    }
    ImageEval {
        scores: dets.iter().map(|d| d.score).collect(),
        matched,
        det_ignored,
        num_gt,
    }
}

/// Interpolated AP and final recall for one class pooled over images, or `None` without GT.
fn accumulate(evals: &[ImageEval], t: usize) -> Option<(f64, f64)> {
    let npig: usize = evals.iter().map(|e| e.num_gt).sum();
    if npig == 0 {
        return None;
    }
    let mut pooled: Vec<(f32, bool, bool)> = Vec::new();
    for e in evals {
        for d in 0..e.scores.len() {
            pooled.push((e.scores[d], e.matched[t][d], e.det_ignored[t][d]));
        }
    }
    // stable sort keeps image order among equal scores
    pooled.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut recall = Vec::new();
    let mut precision = Vec::new();
    for (_, m, ign) in pooled {
        if ign {
            continue;
        }
        if m {
            tp += 1;
        } else {
            fp += 1;
        }
        recall.push(tp as f64 / npig as f64);
        precision.push(tp as f64 / (tp + fp) as f64);
    }
    let final_recall = recall.last().copied().unwrap_or(0.0);
    for i in (1..precision.len()).rev() {
        if precision[i] > precision[i - 1] {
            precision[i - 1] = precision[i];
        }
    }
    let mut sum = 0.0;
    for k in 0..RECALL_POINTS {
        let r = k as f64 / (RECALL_POINTS - 1) as f64;
        let idx = recall.partition_point(|x| *x < r);
        if idx < precision.len() {
            sum += precision[idx];
        }
    }
    Some((sum / RECALL_POINTS as f64, final_recall))
}

/// Mean over thresholds `ts` and classes with GT of AP (or recall).
fn summarize(
    dets: &[Vec<Detection>],
    gts: &[Vec<Annotation>],
    num_classes: usize,
    area: AreaRange,
    max_dets: usize,
    thresholds: &[f32],
    ts: &[usize],
) -> (f64, f64, Vec<f64>) {
    let mut ap_sum = 0.0;
    let mut ar_sum = 0.0;
    let mut count = 0usize;
    let mut per_class = vec![0.0; num_classes];
    for (c, pc) in per_class.iter_mut().enumerate() {
        let evals: Vec<ImageEval> = dets
            .iter()
            .zip(gts)
            .map(|(d, g)| {
                let d: Vec<&Detection> = d.iter().filter(|x| x.class == c).collect();
                let g: Vec<&Annotation> = g.iter().filter(|x| x.class == c).collect();
                evaluate_image(&d, &g, area, max_dets, thresholds)
            })
            .collect();
        let mut class_ap = 0.0;
        let mut class_n = 0usize;
        for &t in ts {
            if let Some((ap, ar)) = accumulate(&evals, t) {
                ap_sum += ap;
                ar_sum += ar;
                count += 1;
                class_ap += ap;
                class_n += 1;
            }
        }
        if class_n > 0 {
            *pc = class_ap / class_n as f64;
        }
    }
    if count == 0 {
        (0.0, 0.0, per_class)
    } else {
        (ap_sum / count as f64, ar_sum / count as f64, per_class)
    }
}

/// Standard COCO summary over `dets[i]` and `gts[i]` for each image `i`.
pub fn evaluate(dets: &[Vec<Detection>], gts: &[Vec<Annotation>], num_classes: usize) -> EvalResult {
    evaluate_with_thresholds(dets, gts, num_classes, &coco_thresholds())
}

pub fn evaluate_with_thresholds(
    dets: &[Vec<Detection>],
    gts: &[Vec<Annotation>],
    num_classes: usize,
    thresholds: &[f32],
) -> EvalResult {
    assert_eq!(dets.len(), gts.len(), "one detection list per image");
    let all: Vec<usize> = (0..thresholds.len()).collect();
    let pick = |v: f32| -> Vec<usize> {
        thresholds.iter().position(|t| (t - v).abs() < 1e-6).into_iter().collect()
    };
    let s = |area, max_dets, ts: &[usize]| summarize(dets, gts, num_classes, area, max_dets, thresholds, ts);
    let (map, ar100, per_class_ap) = s(AreaRange::All, 100, &all);
    EvalResult {
        map,
        ap50: s(AreaRange::All, 100, &pick(0.5)).0,
        ap75: s(AreaRange::All, 100, &pick(0.75)).0,
        ap_small: s(AreaRange::Small, 100, &all).0,
        ap_medium: s(AreaRange::Medium, 100, &all).0,
        ap_large: s(AreaRange::Large, 100, &all).0,
        ar1: s(AreaRange::All, 1, &all).1,
        ar10: s(AreaRange::All, 10, &all).1,
        ar100,
        per_class_ap,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::BBox;

    fn det(x: f32, score: f32) -> Detection {
        Detection {
            bbox: BBox::new(x, 0.0, x + 10.0, 10.0).unwrap(),
            class: 0,
            score,
        }
    }

    fn gt(x: f32) -> Annotation {
        Annotation {
            bbox: BBox::new(x, 0.0, x + 10.0, 10.0).unwrap(),
            class: 0,
        }
    }

    #[test]
    fn perfect_detection() {
        let r = evaluate(&[vec![det(0.0, 0.9)]], &[vec![gt(0.0)]], 1);
        assert_eq!(r.map, 1.0);
        assert_eq!(r.ar100, 1.0);
        assert_eq!(r.ap_small, 1.0);
    }

    #[test]
    fn no_detections() {
        let r = evaluate(&[vec![]], &[vec![gt(0.0)]], 1);
        assert_eq!(r.map, 0.0);
        assert_eq!(r.ar100, 0.0);
    }

    #[test]
    fn false_positive_ranked_first_halves_ap() {
        let r = evaluate_with_thresholds(&[vec![det(50.0, 0.9), det(0.0, 0.8)]], &[vec![gt(0.0)]], 1, &[0.5]);
        assert!((r.map - 0.5).abs() < 1e-12);
    }

    #[test]
    fn only_top_detection_counts_for_ar1() {
        let r = evaluate(&[vec![det(50.0, 0.9), det(0.0, 0.8)]], &[vec![gt(0.0)]], 1);
        assert_eq!(r.ar1, 0.0);
        assert_eq!(r.ar10, 1.0);
    }
}
