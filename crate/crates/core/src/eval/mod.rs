//! Detection metrics and diagnostic statistics.

mod coco_eval;
mod cosine;
mod stats;

pub use coco_eval::{coco_thresholds, evaluate, evaluate_with_thresholds, AreaRange, EvalResult, LARGE_AREA, SMALL_AREA};
pub use cosine::{cosine_distance_map, CosineMap};
pub use stats::{
    anchor_overlap_stats, median, positive_area_ratio_stats, AreaRatioStats, GtOverlap, Histogram, MetricHistograms,
    OverlapStats, BIN_WIDTH,
};
