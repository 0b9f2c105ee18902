//! Distillation of a frozen teacher detector into a student: region weighting, focal and
//! global localization distillation, and classification KD.

mod losses;
mod raster;
mod weights;

pub use losses::{
    classification_kd_loss, focal_distill_loss, global_distill_loss, init_reconstruction, localization_distill_loss,
    sample_keep_mask, RECON_PREFIX,
};
pub use raster::{parse_weight_raster, write_weight_raster};
pub use weights::{compute_vlr_weights, DistillWeights, LevelWeights};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum VlrMode {
    /// Centerness of the anchor inside the teacher's decoded box.
    Cid,
    /// Centerness against the GT box containing the anchor.
    CidWithinGt,
    /// IoU weighting of anchor boxes with low DIoU to a GT.
    LdVlr,
}

impl VlrMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "cid" => Ok(VlrMode::Cid),
            "cid-within-gt" | "cid_within_gt" => Ok(VlrMode::CidWithinGt),
            "ld-vlr" | "ld_vlr" | "ld" => Ok(VlrMode::LdVlr),
            other => Err(Error::Config(format!("unknown distillation mode {other:?}"))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            VlrMode::Cid => "cid",
            VlrMode::CidWithinGt => "cid-within-gt",
            VlrMode::LdVlr => "ld-vlr",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DistillConfig {
    /// Centerness threshold below which non-positive anchors become valuable regions.
    pub gamma: f32,
    /// Weight of valuable regions relative to positives in the focal term.
    pub alpha: f32,
    /// Weight of the global term.
    pub beta: f32,
    /// Fraction of pixels masked before reconstruction.
    pub lambda: f32,
    pub temperature: f32,
    pub mode: VlrMode,
    /// Valuable regions must lie within `filter_scale` GT diagonals of the nearest GT center.
    pub filter_scale: f32,
    pub gamma_ld: f32,
    pub alpha_pos: f32,
    pub lambda_vlr: f32,
    /// Side of the square anchor box used by the DIoU rule, in units of the level stride.
    pub anchor_box_scale: f32,
    /// Also weight classification KD by valuable regions.
    pub cls_kd_vlr: bool,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            gamma: 0.45,
            alpha: 1.0,
            beta: 4.0,
            lambda: 0.65,
            temperature: 10.0,
            mode: VlrMode::Cid,
            filter_scale: 0.75,
            gamma_ld: 0.4,
            alpha_pos: 0.5,
            lambda_vlr: 0.25,
            anchor_box_scale: 8.0,
            cls_kd_vlr: false,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |name: &str, v: f32| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} = {v} outside [0, 1]")))
            }
        };
        unit("gamma", self.gamma)?;
        unit("lambda", self.lambda)?;
        unit("gamma_ld", self.gamma_ld)?;
        unit("alpha_pos", self.alpha_pos)?;
        if !(self.alpha >= 0.0 && self.beta >= 0.0 && self.lambda_vlr >= 0.0) {
            return Err(Error::Config("alpha, beta and lambda_vlr must be non-negative".into()));
        }
        if !(self.temperature > 0.0) || !(self.anchor_box_scale > 0.0) || !(self.filter_scale >= 0.0) {
            return Err(Error::Config("temperature and anchor_box_scale must be positive".into()));
        }
        Ok(())
    }
}

/// `0.5 x^2` for `|x| < 1`, otherwise `|x| - 0.5`.
pub fn smooth_l1(x: f32) -> f32 {
    if x.abs() < 1.0 {
        0.5 * x * x
    } else {
        x.abs() - 0.5
    }
}
