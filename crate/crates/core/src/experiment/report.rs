//! Statistics runs and FLOP reports.

use std::fs;
use std::path::Path;

use serde::Serialize;

use super::config::Settings;
use crate::detector::assign::positive_regions;
use crate::detector::{assign_targets, network_spec, predict, ModelConfig};
use crate::error::{Error, Result};
use crate::eval::{anchor_overlap_stats, cosine_distance_map, positive_area_ratio_stats, SMALL_AREA};
use crate::geometry::AnchorGrid;
use crate::lightml::{flop_spec, LightMLParams};
use crate::synth::Dataset;
use crate::tensor::{count_flops, FlopReport, ParamStore, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StatsSummary {
    pub instances_small: usize,
    pub instances_large: usize,
    pub excluded: usize,
    pub median_diou_small: Option<f64>,
    pub median_diou_large: Option<f64>,
    pub median_area_ratio_small: Option<f64>,
    pub median_area_ratio_large: Option<f64>,
    /// Mean teacher-student cosine distance of the regression maps near small GTs, per level.
    pub cosine_near_small: Option<Vec<Option<f64>>>,
}

fn write(dir: &Path, name: &str, text: &str) -> Result<()> {
    let p = dir.join(name);
    fs::write(&p, text).map_err(|e| Error::io(&p, e))
}

/// Anchor-overlap and positive-area statistics of `ds` under the student's pyramid, written
/// as histogram CSVs plus `stats.json`. With both models given, also writes cosine maps of
/// their regression outputs on the first `cosine_images` images.
pub fn run_stats(
    s: &Settings,
    ds: &Dataset,
    models: Option<(&ModelConfig, &ParamStore, &ModelConfig, &ParamStore)>,
    cosine_images: usize,
    dir: &Path,
) -> Result<StatsSummary> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let strides = &s.student.strides;
    let grids: Vec<AnchorGrid> = ds
        .images
        .iter()
        .map(|im| AnchorGrid::new(im.height, im.width, strides))
        .collect::<Result<_>>()?;
    let overlap = anchor_overlap_stats(&ds.annotations, &grids, s.distill.params.anchor_box_scale);
    for (split, h) in [("small", &overlap.small), ("large", &overlap.large)] {
        write(dir, &format!("overlap_iou_{split}.csv"), &h.iou.to_csv())?;
        write(dir, &format!("overlap_giou_{split}.csv"), &h.giou.to_csv())?;
        write(dir, &format!("overlap_diou_{split}.csv"), &h.diou.to_csv())?;
    }

    let mut gts = Vec::new();
    let mut regions = Vec::new();
    for (anns, grid) in ds.annotations.iter().zip(&grids) {
        let asg = assign_targets(grid, anns, &s.assign)?;
        for (a, cells) in anns.iter().zip(positive_regions(&asg, anns.len())) {
            gts.push(a.clone());
            regions.push(cells.iter().map(|(l, _)| grid.levels[*l].stride).collect::<Vec<_>>());
        }
    }
    let ratios = positive_area_ratio_stats(&gts, &regions);
    write(dir, "area_ratio_small.csv", &ratios.small.to_csv())?;
    write(dir, "area_ratio_large.csv", &ratios.large.to_csv())?;

    let cosine_near_small = match models {
        Some((tc, ts, sc, ss)) => {
            let mut per_level: Vec<(f64, usize)> = vec![(0.0, 0); sc.strides.len()];
            for i in 0..cosine_images.min(ds.len()) {
                let px = ds.images[i].pixels.as_ref().ok_or_else(|| Error::invalid("images without pixels"))?;
                let x = Tensor::new([&[1], px.shape()].concat(), px.data().to_vec())?;
                let (to, so) = (predict(tc, ts, &x)?, predict(sc, ss, &x)?);
                for (l, (tl, sl)) in to.levels.iter().zip(&so.levels).enumerate() {
                    let m = cosine_distance_map(&tl.reg_map, &sl.reg_map)?;
                    write(dir, &format!("cosine_{i:04}_s{}.csv", tl.stride), &m.to_csv())?;
                    let small = |a: &crate::synth::Annotation| a.bbox.area() < SMALL_AREA;
                    if let Some(v) = m.mean_near(&ds.annotations[i], tl.stride, s.distill.params.filter_scale, small) {
                        per_level[l].0 += v;
                        per_level[l].1 += 1;
                    }
                }
            }
            Some(per_level.iter().map(|(v, n)| (*n > 0).then(|| v / *n as f64)).collect())
        }
        None => None,
    };

    let summary = StatsSummary {
        instances_small: overlap.per_gt.iter().filter(|g| g.area < SMALL_AREA as f64).count(),
        instances_large: overlap.per_gt.iter().filter(|g| g.area >= SMALL_AREA as f64).count(),
        excluded: overlap.excluded,
        median_diou_small: overlap.median_diou(true),
        median_diou_large: overlap.median_diou(false),
        median_area_ratio_small: ratios.median_small,
        median_area_ratio_large: ratios.median_large,
        cosine_near_small,
    };
    write(dir, "stats.json", &serde_json::to_string_pretty(&summary).expect("serialisable"))?;
    Ok(summary)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FlopSummary {
    pub teacher: u64,
    pub student: u64,
    pub student_light_ml: u64,
}

pub fn model_flops(cfg: &ModelConfig, hw: (usize, usize)) -> Result<FlopReport> {
    count_flops(&network_spec(cfg)?, hw)
}

/// Cost of adding Light-ML with `channels` head channels over the given pyramid.
pub fn light_ml_delta(channels: usize, p: &LightMLParams, strides: &[usize], hw: (usize, usize)) -> Result<FlopReport> {
    p.validate()?;
    count_flops(&flop_spec(channels, p, strides), hw)
}

pub fn flop_summary(s: &Settings) -> Result<FlopSummary> {
    let hw = (s.scene.height, s.scene.width);
    let mut with_ml = s.student.clone();
    with_ml.light_ml = true;
    Ok(FlopSummary {
        teacher: model_flops(&s.teacher, hw)?.total,
        student: model_flops(&s.student, hw)?.total,
        student_light_ml: model_flops(&with_ml, hw)?.total,
    })
}
