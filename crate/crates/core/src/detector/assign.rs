//! Center-sampling label assignment.

use crate::error::{Error, Result};
use crate::geometry::{AnchorGrid, BBox};
use crate::synth::Annotation;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MainWeight {
    /// 1 on every positive anchor.
    Binary,
    /// `exp(-2 (d / (radius * stride))^2)` for an anchor at distance `d` from its GT center.
    Quality,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AssignConfig {
    /// Sampling radius in grid cells of the level.
    pub radius: f32,
    /// Level `l` accepts GTs whose longer side is in `[range(l-1), range(l))`, with
    /// `range(l) = scale_factor * stride_l` and the last level unbounded above.
    pub scale_factor: f32,
    pub main_weight: MainWeight,
    pub bins: usize,
}

impl Default for AssignConfig {
    fn default() -> Self {
        AssignConfig {
            radius: 1.5,
            scale_factor: 8.0,
            main_weight: MainWeight::Binary,
            bins: 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LevelAssignment {
    pub stride: usize,
    pub gt: Vec<Option<usize>>,
    /// `l, t, r, b` distances to the assigned GT in stride units, clipped to the
    /// representable bin range; zero for background.
    pub targets: Vec<[f32; 4]>,
    pub i_main: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AssignmentResult {
    pub levels: Vec<LevelAssignment>,
}

impl AssignmentResult {
    pub fn num_pos(&self) -> usize {
        self.levels.iter().map(|l| l.gt.iter().filter(|g| g.is_some()).count()).sum()
    }

    pub fn is_positive(&self, level: usize, anchor: usize) -> bool {
        self.levels[level].gt[anchor].is_some()
    }
}

/// Scale range `[lo, hi)` of the longer GT side accepted at each level.
pub fn scale_ranges(strides: &[usize], scale_factor: f32) -> Vec<(f32, f32)> {
    let mut lo = 0.0;
    strides
        .iter()
        .enumerate()
        .map(|(l, &s)| {
            let hi = if l + 1 == strides.len() { f32::INFINITY } else { scale_factor * s as f32 };
            let r = (lo, hi);
            lo = hi;
            r
        })
        .collect()
}

pub fn assign_targets(anchors: &AnchorGrid, gts: &[Annotation], cfg: &AssignConfig) -> Result<AssignmentResult> {
    if cfg.bins < 2 || !(cfg.radius > 0.0) {
        return Err(Error::invalid("assigner needs bins >= 2 and a positive radius"));
    }
    for (i, gt) in gts.iter().enumerate() {
        if !gt.bbox.is_valid() || gt.bbox.width() < 1.0 || gt.bbox.height() < 1.0 {
            return Err(Error::invalid(format!("GT {i} is smaller than 1 px: {:?}", gt.bbox)));
        }
    }
    let strides: Vec<usize> = anchors.levels.iter().map(|l| l.stride).collect();
    let ranges = scale_ranges(&strides, cfg.scale_factor);
    let max_t = cfg.bins as f32 - 1.0 - 0.01;
    let mut levels = Vec::with_capacity(anchors.levels.len());
    for (lvl, level) in anchors.levels.iter().enumerate() {
        let s = level.stride as f32;
        let radius = cfg.radius * s;
        let (lo, hi) = ranges[lvl];
        let n = level.len();
        let mut gt_of = vec![None; n];
        let mut targets = vec![[0.0f32; 4]; n];
        let mut i_main = vec![0.0f32; n];
        for a in 0..n {
            let (x, y) = level.point(a);
            let mut best: Option<(usize, f32, f32)> = None;
            for (gi, gt) in gts.iter().enumerate() {
                let side = gt.bbox.width().max(gt.bbox.height());
                if side < lo || side >= hi {
                    continue;
                }
                let (cx, cy) = gt.bbox.center();
                let d = (x - cx).hypot(y - cy);
                if d > radius {
                    continue;
                }
                let area = gt.bbox.area();
                if best.is_none_or(|(_, ba, _)| area < ba) {
                    best = Some((gi, area, d));
                }
            }
            if let Some((gi, _, d)) = best {
                let b = &gts[gi].bbox;
                gt_of[a] = Some(gi);
                targets[a] = [x - b.x1, y - b.y1, b.x2 - x, b.y2 - y].map(|v| (v / s).clamp(0.0, max_t));
                i_main[a] = match cfg.main_weight {
                    MainWeight::Binary => 1.0,
                    MainWeight::Quality => (-2.0 * (d / radius).powi(2)).exp(),
                };
            }
        }
        levels.push(LevelAssignment {
            stride: level.stride,
            gt: gt_of,
            targets,
            i_main,
        });
    }
    Ok(AssignmentResult { levels })
}

/// Positive region of each GT: the anchors assigned to it, as `(level, anchor)` pairs.
pub fn positive_regions(asg: &AssignmentResult, num_gts: usize) -> Vec<Vec<(usize, usize)>> {
    let mut out = vec![Vec::new(); num_gts];
    for (l, level) in asg.levels.iter().enumerate() {
        for (a, gt) in level.gt.iter().enumerate() {
            if let Some(g) = gt {
                out[*g].push((l, a));
            }
        }
    }
    out
}

/// GT box in stride units relative to the anchor point, unclipped: `(l, t, r, b)`.
pub fn raw_offsets(point: (f32, f32), b: &BBox, stride: f32) -> [f32; 4] {
    let (x, y) = point;
    [x - b.x1, y - b.y1, b.x2 - x, b.y2 - y].map(|v| v / stride)
}
