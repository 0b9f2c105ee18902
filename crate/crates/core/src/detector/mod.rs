//! Small dense detector: strided conv backbone, top-down feature pyramid and a shared
//! two-branch head predicting class logits and per-side distance distributions.

pub mod assign;
mod config;
pub mod decode;
pub mod loss;
pub mod model;

pub use assign::{assign_targets, AssignConfig, AssignmentResult, LevelAssignment, MainWeight};
pub use config::{ModelConfig, Role};
pub use decode::{decode_detections, DecodeConfig, Detection};
pub use loss::{detection_loss, DetLosses};
pub use model::{forward, init_params, network_spec, predict, DetectionOutput, LevelOutput, LevelVars};
