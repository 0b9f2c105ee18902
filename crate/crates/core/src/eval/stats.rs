//! Per-GT anchor overlap and positive-region statistics.

use serde::Serialize;

use super::SMALL_AREA;
use crate::geometry::{overlap_metrics, AnchorGrid, BBox};
use crate::synth::Annotation;

/// Fixed-width histogram over `[lo, hi]`; values outside are clamped into the end bins.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Histogram {
    pub lo: f64,
    pub width: f64,
    pub counts: Vec<usize>,
}

impl Histogram {
    pub fn new(lo: f64, hi: f64, width: f64) -> Self {
        let bins = ((hi - lo) / width).round().max(1.0) as usize;
        Histogram {
            lo,
            width,
            counts: vec![0; bins],
        }
    }

    pub fn add(&mut self, v: f64) {
        let i = ((v - self.lo) / self.width).floor();
        let i = (i.max(0.0) as usize).min(self.counts.len() - 1);
        self.counts[i] += 1;
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }

    /// `bin_lo,bin_hi,count` rows.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("bin_lo,bin_hi,count\n");
        for (i, c) in self.counts.iter().enumerate() {
            let a = self.lo + i as f64 * self.width;
            s.push_str(&format!("{:.4},{:.4},{c}\n", a, a + self.width));
        }
        s
    }
}

pub const BIN_WIDTH: f64 = 0.05;

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { (v[n / 2 - 1] + v[n / 2]) / 2.0 })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GtOverlap {
    pub area: f64,
    pub mean_iou: f64,
    pub mean_giou: f64,
    pub mean_diou: f64,
    pub anchors: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricHistograms {
    pub iou: Histogram,
    pub giou: Histogram,
    pub diou: Histogram,
}

impl MetricHistograms {
    fn new() -> Self {
        MetricHistograms {
            iou: Histogram::new(0.0, 1.0, BIN_WIDTH),
            giou: Histogram::new(-1.0, 1.0, BIN_WIDTH),
            diou: Histogram::new(-1.0, 1.0, BIN_WIDTH),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct OverlapStats {
    pub per_gt: Vec<GtOverlap>,
    pub small: MetricHistograms,
    pub large: MetricHistograms,
    /// GTs overlapping no anchor box.
    pub excluded: usize,
}

impl OverlapStats {
    pub fn median_diou(&self, small: bool) -> Option<f64> {
        let v: Vec<f64> = self
            .per_gt
            .iter()
            .filter(|g| (g.area < SMALL_AREA as f64) == small)
            .map(|g| g.mean_diou)
            .collect();
        median(&v)
    }
}

/// Mean IoU, GIoU and DIoU of each GT over the square anchor boxes (side
/// `anchor_box_scale * stride`, all levels) that overlap it with positive IoU. `grids[i]`
/// is the anchor grid of image `i`.
pub fn anchor_overlap_stats(gts: &[Vec<Annotation>], grids: &[AnchorGrid], anchor_box_scale: f32) -> OverlapStats {
    let mut stats = OverlapStats {
        per_gt: Vec::new(),
        small: MetricHistograms::new(),
        large: MetricHistograms::new(),
        excluded: 0,
    };
    for (anns, grid) in gts.iter().zip(grids) {
        for a in anns {
            let (mut si, mut sg, mut sd, mut n) = (0.0f64, 0.0f64, 0.0f64, 0usize);
            for level in &grid.levels {
                let side = anchor_box_scale * level.stride as f32;
                for idx in 0..level.len() {
                    let (x, y) = level.point(idx);
                    let o = overlap_metrics(&BBox::centered(x, y, side), &a.bbox);
                    if o.iou > 0.0 {
                        si += o.iou as f64;
                        sg += o.giou as f64;
                        sd += o.diou as f64;
                        n += 1;
                    }
                }
            }
            if n == 0 {
                stats.excluded += 1;
                continue;
            }
            let g = GtOverlap {
                area: a.bbox.area() as f64,
                mean_iou: si / n as f64,
                mean_giou: sg / n as f64,
                mean_diou: sd / n as f64,
                anchors: n,
            };
            let h = if g.area < SMALL_AREA as f64 { &mut stats.small } else { &mut stats.large };
            h.iou.add(g.mean_iou);
            h.giou.add(g.mean_giou);
            h.diou.add(g.mean_diou);
            stats.per_gt.push(g);
        }
    }
    stats
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AreaRatioStats {
    /// `(GT area, positive area / GT area)` per GT.
    pub ratios: Vec<(f64, f64)>,
    pub small: Histogram,
    pub large: Histogram,
    pub median_small: Option<f64>,
    pub median_large: Option<f64>,
}

/// Ratio of each GT's positive-region area to its own area. `regions[k]` lists the region
/// cell sizes (strides) making up GT `k`'s positive region; each cell covers `stride^2`.
pub fn positive_area_ratio_stats(gts: &[Annotation], regions: &[Vec<usize>]) -> AreaRatioStats {
    let ratios: Vec<(f64, f64)> = gts
        .iter()
        .zip(regions)
        .map(|(g, cells)| {
            let area = g.bbox.area() as f64;
            let pos: f64 = cells.iter().map(|s| (*s * *s) as f64).sum();
            (area, pos / area)
        })
        .collect();
    let hi = ratios.iter().map(|r| r.1).fold(1.0f64, f64::max).ceil();
    let mut small = Histogram::new(0.0, hi, BIN_WIDTH);
    let mut large = Histogram::new(0.0, hi, BIN_WIDTH);
    let (mut vs, mut vl) = (Vec::new(), Vec::new());
    for &(area, r) in &ratios {
        if area < SMALL_AREA as f64 {
            small.add(r);
            vs.push(r);
        } else {
            large.add(r);
            vl.push(r);
        }
    }
    AreaRatioStats {
        median_small: median(&vs),
        median_large: median(&vl),
        ratios,
        small,
        large,
    }
}
