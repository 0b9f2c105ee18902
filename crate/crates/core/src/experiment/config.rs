//! Flat `key = value` experiment configuration.
//!
//! Lines are `key = value`; `#` starts a comment. Every key has a documented default
//! (see [`KEYS`]); unknown keys are rejected. `seed` has no default and must be set.

use std::collections::BTreeMap;
use std::path::PathBuf;

use crate::detector::{AssignConfig, DecodeConfig, MainWeight, ModelConfig, Role};
use crate::distill::{DistillConfig, VlrMode};
use crate::error::{Error, Result};
use crate::lightml::{Activation, LightMLParams};
use crate::synth::SceneSpec;
use crate::tensor::OptimizerKind;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Kind {
    Int,
    Float,
    Bool,
    List,
    Text,
    Choice(&'static [&'static str]),
}

/// A documented configuration key.
#[derive(Clone, Copy, Debug)]
pub struct Key {
    pub name: &'static str,
    pub default: &'static str,
    pub kind: Kind,
    pub doc: &'static str,
}

const fn key(name: &'static str, default: &'static str, kind: Kind, doc: &'static str) -> Key {
    Key { name, default, kind, doc }
}

use Kind::*;

pub const KEYS: &[Key] = &[
    key("seed", "", Int, "run seed (required): initialisation, sample order, masks, flips"),
    key("output.dir", "runs/default", Text, "directory receiving the run outputs"),
    key("threads", "1", Int, "worker threads for data generation"),
    key("data.dir", "", Text, "load a dataset written by gen-data instead of generating one"),
    key("data.train_images", "500", Int, "synthetic training images"),
    key("data.test_images", "100", Int, "synthetic held-out images"),
    key("data.height", "96", Int, "image height in pixels"),
    key("data.width", "96", Int, "image width in pixels"),
    key("data.min_objects", "2", Int, "fewest objects requested per image"),
    key("data.max_objects", "6", Int, "most objects requested per image"),
    key("data.min_size", "4", Int, "smallest object side in pixels"),
    key("data.max_size", "12", Int, "largest object side in pixels"),
    key("data.fg_fraction", "0.05", Float, "cap on annotated area per image"),
    key("data.clutter", "0.35", Float, "background noise amplitude"),
    key("data.min_distractors", "4", Int, "fewest unannotated clutter shapes"),
    key("data.max_distractors", "10", Int, "most unannotated clutter shapes"),
    key("data.classes", "3", Int, "object classes (at most 3 for synthetic data)"),
    key("data.seed", "7", Int, "dataset seed, independent of the run seed"),
    key("teacher.widths", "16,32,48,64", List, "backbone stage widths"),
    key("teacher.depths", "0,1,1,1", List, "extra convs per backbone stage"),
    key("teacher.head_channels", "48", Int, "head and pyramid channels"),
    key("teacher.head_convs", "2", Int, "convs per head branch"),
    key("teacher.bins", "8", Int, "distribution bins per box side"),
    key("teacher.strides", "8,16", List, "pyramid strides"),
    key("teacher.light_ml", "false", Bool, "insert Light-ML into the head"),
    key("teacher.light_ml.ratio", "0.25", Float, "fraction of channels that are convolved"),
    key("teacher.light_ml.activation", "identity", Choice(&["identity", "relu"]), "activation after the fusion conv"),
    key("teacher.checkpoint", "", Text, "teacher checkpoint for distill, eval and stats"),
    key("student.widths", "8,16,24,32", List, "backbone stage widths"),
    key("student.depths", "0,0,0,0", List, "extra convs per backbone stage"),
    key("student.head_channels", "24", Int, "head and pyramid channels"),
    key("student.head_convs", "1", Int, "convs per head branch"),
    key("student.bins", "8", Int, "distribution bins per box side"),
    key("student.strides", "8,16", List, "pyramid strides"),
    key("student.light_ml", "false", Bool, "insert Light-ML into the head"),
    key("student.light_ml.ratio", "0.25", Float, "fraction of channels that are convolved"),
    key("student.light_ml.activation", "identity", Choice(&["identity", "relu"]), "activation after the fusion conv"),
    key("student.checkpoint", "", Text, "student checkpoint for eval and stats"),
    key("train.epochs", "20", Int, "passes over the training split"),
    key("train.batch", "1", Int, "images per step"),
    key("train.optimizer", "sgd", Choice(&["sgd", "adam"]), "update rule"),
    key("train.lr", "0.01", Float, "base learning rate"),
    key("train.momentum", "0.9", Float, "SGD momentum"),
    key("train.weight_decay", "0.0001", Float, "L2 decay on weights (not biases)"),
    key("train.warmup_steps", "300", Int, "linear warm-up steps"),
    key("train.grad_clip", "10", Float, "clip the global gradient norm to this value (0 disables)"),
    key("train.hflip", "true", Bool, "random horizontal flips"),
    key("train.loss.cls", "1", Float, "weight of the quality focal loss"),
    key("train.loss.giou", "2", Float, "weight of the GIoU loss"),
    key("train.loss.dfl", "0.25", Float, "weight of the distribution focal loss"),
    key("assign.radius", "1.5", Float, "center-sampling radius in strides"),
    key("assign.scale_factor", "8", Float, "level l takes GT sides below scale_factor * stride"),
    key("assign.main_weight", "binary", Choice(&["binary", "quality"]), "codomain of the positive-region weight"),
    key("decode.score_thresh", "0.05", Float, "minimum detection score"),
    key("decode.nms_iou", "0.6", Float, "NMS IoU threshold"),
    key("decode.pre_nms", "1000", Int, "candidates kept before NMS"),
    key("decode.max_dets", "100", Int, "detections kept per image"),
    key("distill.cls_kd", "true", Bool, "classification KD on positives"),
    key("distill.focal", "true", Bool, "weighted KL on the regression distributions"),
    key("distill.vlr", "true", Bool, "add valuable-region weights to the KL term"),
    key("distill.global", "true", Bool, "masked reconstruction of the regression map"),
    key("distill.mode", "cid", Choice(&["cid", "cid-within-gt", "ld-vlr"]), "valuable-region rule"),
    key("distill.gamma", "0.45", Float, "centerness threshold"),
    key("distill.alpha", "1", Float, "valuable-region weight in the KL term"),
    key("distill.beta", "4", Float, "weight of the global term"),
    key("distill.lambda", "0.65", Float, "masked pixel fraction"),
    key("distill.temperature", "10", Float, "KD temperature"),
    key("distill.filter_scale", "0.75", Float, "valuable regions lie within this many GT diagonals"),
    key("distill.gamma_ld", "0.4", Float, "DIoU threshold factor of the LD rule"),
    key("distill.alpha_pos", "0.5", Float, "DIoU threshold scale of the LD rule"),
    key("distill.lambda_vlr", "0.25", Float, "valuable-region weight of the LD rule"),
    key("distill.anchor_box_scale", "8", Float, "anchor box side in strides for the LD rule and statistics"),
    key("distill.cls_kd_vlr", "false", Bool, "weight classification KD by valuable regions too"),
    key("distill.kd_cls_weight", "1", Float, "multiplier of the classification KD term"),
    key("distill.loc_weight", "1", Float, "multiplier of the localization distillation term"),
];

pub fn find_key(name: &str) -> Option<&'static Key> {
    KEYS.iter().find(|k| k.name == name)
}

fn check_value(k: &Key, v: &str) -> Result<()> {
    let bad = |what: &str| Err(Error::Config(format!("{} = {v:?}: expected {what}", k.name)));
    if v.is_empty() && (k.kind == Text || k.name == "seed") {
        return Ok(());
    }
    match k.kind {
        Int => v.parse::<u64>().map(|_| ()).or_else(|_| bad("a non-negative integer")),
        Float => match v.parse::<f32>() {
            Ok(x) if x.is_finite() => Ok(()),
            _ => bad("a finite number"),
        },
        Bool => v.parse::<bool>().map(|_| ()).or_else(|_| bad("true or false")),
        List => {
            if v.split(',').all(|p| p.trim().parse::<usize>().is_ok()) {
                Ok(())
            } else {
                bad("a comma-separated list of integers")
            }
        }
        Text => Ok(()),
        Choice(opts) => {
            if opts.contains(&v) {
                Ok(())
            } else {
                bad(&format!("one of {}", opts.join(", ")))
            }
        }
    }
}

/// Raw key/value configuration with every key present.
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    values: BTreeMap<&'static str, String>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            values: KEYS.iter().map(|k| (k.name, k.default.to_string())).collect(),
        }
    }
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Malformed {
                line: i + 1,
                column: 1,
                message: "expected key = value".into(),
            })?;
            cfg.set(k.trim(), v.trim()).map_err(|e| Error::Malformed {
                line: i + 1,
                column: 1,
                message: e.to_string(),
            })?;
        }
        Ok(cfg)
    }

    pub fn set(&mut self, name: &str, value: &str) -> Result<()> {
        let k = find_key(name).ok_or_else(|| Error::Config(format!("unknown key {name:?}")))?;
        check_value(k, value)?;
        self.values.insert(k.name, value.to_string());
        Ok(())
    }

    /// Applies a `key=value` override.
    pub fn apply(&mut self, assignment: &str) -> Result<()> {
        let (k, v) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {assignment:?} is not key=value")))?;
        self.set(k.trim(), v.trim())
    }

    pub fn get(&self, name: &str) -> &str {
        self.values.get(name).map(String::as_str).unwrap_or_else(|| panic!("undeclared key {name}"))
    }

    /// Every key in declaration order, one `key = value` line each.
    pub fn to_text(&self) -> String {
        KEYS.iter().map(|k| format!("{} = {}\n", k.name, self.get(k.name))).collect()
    }

    /// Defaults with their documentation, in the format `parse` accepts.
    pub fn documented_defaults() -> String {
        KEYS.iter()
            .map(|k| format!("# {}\n{} = {}\n", k.doc, k.name, k.default))
            .collect()
    }

    fn int(&self, k: &str) -> usize {
        self.get(k).parse().expect("validated on set")
    }

    fn float(&self, k: &str) -> f32 {
        self.get(k).parse().expect("validated on set")
    }

    fn flag(&self, k: &str) -> bool {
        self.get(k).parse().expect("validated on set")
    }

    fn list(&self, k: &str) -> Vec<usize> {
        self.get(k).split(',').map(|p| p.trim().parse().expect("validated on set")).collect()
    }

    fn path(&self, k: &str) -> Option<PathBuf> {
        let v = self.get(k);
        (!v.is_empty()).then(|| PathBuf::from(v))
    }

    fn model(&self, prefix: &str, role: Role) -> ModelConfig {
        let k = |s: &str| format!("{prefix}.{s}");
        ModelConfig {
            role,
            widths: self.list(&k("widths")),
            depths: self.list(&k("depths")),
            head_channels: self.int(&k("head_channels")),
            head_convs: self.int(&k("head_convs")),
            num_classes: self.int("data.classes"),
            bins: self.int(&k("bins")),
            strides: self.list(&k("strides")),
            light_ml: self.flag(&k("light_ml")),
            light_ml_params: LightMLParams {
                ratio: self.float(&k("light_ml.ratio")),
                activation: match self.get(&k("light_ml.activation")) {
                    "relu" => Activation::Relu,
                    _ => Activation::Identity,
                },
            },
        }
    }

    /// Typed settings; fails on cross-field violations and a missing seed.
    pub fn resolve(&self) -> Result<Settings> {
        let seed = self
            .get("seed")
            .parse::<u64>()
            .map_err(|_| Error::Config("seed is mandatory (set `seed = N`)".into()))?;
        let scene = SceneSpec {
            height: self.int("data.height"),
            width: self.int("data.width"),
            min_objects: self.int("data.min_objects"),
            max_objects: self.int("data.max_objects"),
            min_size: self.int("data.min_size"),
            max_size: self.int("data.max_size"),
            max_fg_fraction: self.float("data.fg_fraction"),
            clutter: self.float("data.clutter"),
            min_distractors: self.int("data.min_distractors"),
            max_distractors: self.int("data.max_distractors"),
            num_classes: self.int("data.classes"),
            seed: self.int("data.seed") as u64,
        };
        let teacher = self.model("teacher", Role::Teacher);
        let student = self.model("student", Role::Student);
        let train = TrainSettings {
            epochs: self.int("train.epochs"),
            batch: self.int("train.batch"),
            optimizer: match self.get("train.optimizer") {
                "adam" => OptimizerKind::Adam {
                    beta1: 0.9,
                    beta2: 0.999,
                    eps: 1e-8,
                },
                _ => OptimizerKind::Sgd {
                    momentum: self.float("train.momentum"),
                },
            },
            lr: self.float("train.lr"),
            weight_decay: self.float("train.weight_decay"),
            warmup_steps: self.int("train.warmup_steps"),
            grad_clip: self.float("train.grad_clip"),
            hflip: self.flag("train.hflip"),
            w_cls: self.float("train.loss.cls"),
            w_giou: self.float("train.loss.giou"),
            w_dfl: self.float("train.loss.dfl"),
        };
        let assign = AssignConfig {
            radius: self.float("assign.radius"),
            scale_factor: self.float("assign.scale_factor"),
            main_weight: match self.get("assign.main_weight") {
                "quality" => MainWeight::Quality,
                _ => MainWeight::Binary,
            },
            bins: student.bins,
        };
        let decode = DecodeConfig {
            score_thresh: self.float("decode.score_thresh"),
            nms_iou: self.float("decode.nms_iou"),
            pre_nms: self.int("decode.pre_nms"),
            max_dets: self.int("decode.max_dets"),
        };
        let distill = DistillSettings {
            cls_kd: self.flag("distill.cls_kd"),
            focal: self.flag("distill.focal"),
            vlr: self.flag("distill.vlr"),
            global: self.flag("distill.global"),
            kd_cls_weight: self.float("distill.kd_cls_weight"),
            loc_weight: self.float("distill.loc_weight"),
            params: DistillConfig {
                gamma: self.float("distill.gamma"),
                alpha: self.float("distill.alpha"),
                beta: self.float("distill.beta"),
                lambda: self.float("distill.lambda"),
                temperature: self.float("distill.temperature"),
                mode: VlrMode::parse(self.get("distill.mode"))?,
                filter_scale: self.float("distill.filter_scale"),
                gamma_ld: self.float("distill.gamma_ld"),
                alpha_pos: self.float("distill.alpha_pos"),
                lambda_vlr: self.float("distill.lambda_vlr"),
                anchor_box_scale: self.float("distill.anchor_box_scale"),
                cls_kd_vlr: self.flag("distill.cls_kd_vlr"),
            },
        };
        let s = Settings {
            seed,
            output_dir: PathBuf::from(self.get("output.dir")),
            threads: self.int("threads").max(1),
            data_dir: self.path("data.dir"),
            train_images: self.int("data.train_images"),
            test_images: self.int("data.test_images"),
            scene,
            teacher,
            student,
            teacher_checkpoint: self.path("teacher.checkpoint"),
            student_checkpoint: self.path("student.checkpoint"),
            train,
            assign,
            decode,
            distill,
        };
        s.validate()?;
        Ok(s)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSettings {
    pub epochs: usize,
    pub batch: usize,
    pub optimizer: OptimizerKind,
    pub lr: f32,
    pub weight_decay: f32,
    pub warmup_steps: usize,
    pub grad_clip: f32,
    pub hflip: bool,
    pub w_cls: f32,
    pub w_giou: f32,
    pub w_dfl: f32,
}

/// Which distillation terms are active, and their parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct DistillSettings {
    pub cls_kd: bool,
    pub focal: bool,
    pub vlr: bool,
    pub global: bool,
    pub kd_cls_weight: f32,
    pub loc_weight: f32,
    pub params: DistillConfig,
}

impl DistillSettings {
    pub fn any(&self) -> bool {
        self.cls_kd || self.focal || self.global
    }

    pub fn none() -> Self {
        DistillSettings {
            cls_kd: false,
            focal: false,
            vlr: false,
            global: false,
            kd_cls_weight: 1.0,
            loc_weight: 1.0,
            params: DistillConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Settings {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub threads: usize,
    pub data_dir: Option<PathBuf>,
    pub train_images: usize,
    pub test_images: usize,
    pub scene: SceneSpec,
    pub teacher: ModelConfig,
    pub student: ModelConfig,
    pub teacher_checkpoint: Option<PathBuf>,
    pub student_checkpoint: Option<PathBuf>,
    pub train: TrainSettings,
    pub assign: AssignConfig,
    pub decode: DecodeConfig,
    pub distill: DistillSettings,
}

impl Settings {
    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        self.teacher.validate()?;
        self.student.validate()?;
        self.distill.params.validate()?;
        if self.train.batch == 0 {
            return Err(Error::Config("train.batch must be positive".into()));
        }
        if !(self.train.lr > 0.0) {
            return Err(Error::Config("train.lr must be positive".into()));
        }
        for (name, v) in [("decode.score_thresh", self.decode.score_thresh), ("decode.nms_iou", self.decode.nms_iou)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} = {v} outside [0, 1]")));
            }
        }
        for m in [&self.teacher, &self.student] {
            let s = m.max_stride();
            if self.scene.height % s != 0 || self.scene.width % s != 0 {
                return Err(Error::Config(format!(
                    "image size {}x{} is not divisible by stride {s}",
                    self.scene.height, self.scene.width
                )));
            }
        }
        Ok(())
    }

    /// Configuration of the model trained under `role`.
    pub fn model(&self, role: Role) -> &ModelConfig {
        match role {
            Role::Teacher => &self.teacher,
            Role::Student => &self.student,
        }
    }
}
