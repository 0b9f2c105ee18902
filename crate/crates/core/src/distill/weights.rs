use super::{DistillConfig, VlrMode};
use crate::detector::{AssignmentResult, DetectionOutput};
use crate::error::{Error, Result};
use crate::geometry::{centerness, decode_distribution, iou_f64, offsets, overlap_metrics, AnchorGrid, BBox};
use crate::synth::Annotation;

#[derive(Clone, Debug, PartialEq)]
pub struct LevelWeights {
    pub stride: usize,
    pub height: usize,
    pub width: usize,
    pub i_main: Vec<f32>,
    pub i_vlr: Vec<f32>,
}

/// Per-anchor distillation weights of one image.
#[derive(Clone, Debug, PartialEq)]
pub struct DistillWeights {
    pub levels: Vec<LevelWeights>,
}

impl DistillWeights {
    pub fn mean_vlr(&self) -> f64 {
        let n: usize = self.levels.iter().map(|l| l.i_vlr.len()).sum();
        let s: f64 = self.levels.iter().flat_map(|l| &l.i_vlr).map(|v| *v as f64).sum();
        if n == 0 {
            0.0
        } else {
            s / n as f64
        }
    }

    /// Anchors with a nonzero valuable-region weight.
    pub fn vlr_count(&self) -> usize {
        self.levels.iter().flat_map(|l| &l.i_vlr).filter(|v| **v > 0.0).count()
    }
}

/// GT whose center is closest to `p` (lower index on ties), if within `scale` diagonals.
/// The comparison is done on squared distances in f64, exact for f32 inputs on a modest grid.
fn within_filter(p: (f32, f32), gts: &[Annotation], scale: f32) -> bool {
    let mut best: Option<(f64, &BBox)> = None;
    for gt in gts {
        let (cx, cy) = gt.bbox.center();
        let (dx, dy) = (p.0 as f64 - cx as f64, p.1 as f64 - cy as f64);
        let d2 = dx * dx + dy * dy;
        if best.is_none_or(|(bd, _)| d2 < bd) {
            best = Some((d2, &gt.bbox));
        }
    }
    match best {
        Some((d2, b)) => {
            let (w, h) = (b.width() as f64, b.height() as f64);
            let s = scale as f64;
            d2 <= s * s * (w * w + h * h)
        }
        None => false,
    }
}

fn from_centerness(c: f32, gamma: f32) -> f32 {
    if c < gamma {
        1.0 - c
    } else {
        0.0
    }
}

/// Region weights of one image from the frozen teacher's outputs.
///
/// Positives (from `asg`) carry `i_main` and never receive a valuable-region weight. For
/// the other anchors:
/// - `Cid`: the teacher's decoded box must contain the anchor point and the nearest GT
///   center must lie within `filter_scale` of that GT's diagonal; then `i_vlr = 1 - c` when
///   the anchor's centerness `c` in the teacher box is below `gamma`.
/// - `CidWithinGt`: the same rule with `c` measured in the smallest GT containing the point.
/// - `LdVlr`: a square anchor box of side `anchor_box_scale * stride`; against the GT of
///   highest IoU, `i_vlr = lambda_vlr * IoU` when `DIoU < gamma_ld * alpha_pos` and IoU > 0.
pub fn compute_vlr_weights(
    teacher: &DetectionOutput,
    anchors: &AnchorGrid,
    gts: &[Annotation],
    asg: &AssignmentResult,
    cfg: &DistillConfig,
) -> Result<DistillWeights> {
    cfg.validate()?;
    if teacher.batch != 1 || teacher.levels.len() != anchors.levels.len() || asg.levels.len() != anchors.levels.len() {
        return Err(Error::invalid("compute_vlr_weights: teacher, anchors and assignment disagree"));
    }
    let mut levels = Vec::with_capacity(anchors.levels.len());
    for (l, level) in anchors.levels.iter().enumerate() {
        let n = level.len();
        let t = &teacher.levels[l];
        if t.reg.shape()[0] != n {
            return Err(Error::invalid(format!("level {l}: teacher has {} rows for {n} anchors", t.reg.shape()[0])));
        }
        let k = t.reg.shape()[1];
        let s = level.stride as f32;
        let la = &asg.levels[l];
        let mut i_vlr = vec![0.0f32; n];
        for (a, w) in i_vlr.iter_mut().enumerate() {
            if la.gt[a].is_some() || gts.is_empty() {
                continue;
            }
            let p = level.point(a);
            *w = match cfg.mode {
                VlrMode::Cid => {
                    let tb = decode_distribution(&t.reg.data()[a * k..(a + 1) * k], p, s)?;
                    let o = offsets(p, &tb);
                    if !o.inside || !within_filter(p, gts, cfg.filter_scale) {
                        0.0
                    } else {
                        from_centerness(centerness(&o)?, cfg.gamma)
                    }
                }
                VlrMode::CidWithinGt => {
                    let container = gts
                        .iter()
                        .filter(|g| g.bbox.contains(p.0, p.1))
                        .min_by(|x, y| x.bbox.area().total_cmp(&y.bbox.area()));
                    match container {
                        Some(g) => from_centerness(centerness(&offsets(p, &g.bbox))?, cfg.gamma),
                        None => 0.0,
                    }
                }
                VlrMode::LdVlr => {
                    let ab = BBox::centered(p.0, p.1, cfg.anchor_box_scale * s);
                    let mut best: Option<(f64, &BBox)> = None;
                    for g in gts {
                        let iou = iou_f64(&ab, &g.bbox);
                        if best.is_none_or(|(bi, _)| iou > bi) {
                            best = Some((iou, &g.bbox));
                        }
                    }
                    match best.map(|(_, b)| overlap_metrics(&ab, b)) {
                        Some(o) if o.iou > 0.0 && o.diou < cfg.gamma_ld * cfg.alpha_pos => cfg.lambda_vlr * o.iou,
                        _ => 0.0,
                    }
                }
            };
        }
        levels.push(LevelWeights {
            stride: level.stride,
            height: level.height,
            width: level.width,
            i_main: la.i_main.clone(),
            i_vlr,
        });
    }
    Ok(DistillWeights { levels })
}
