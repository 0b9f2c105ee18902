//! Training, distillation and evaluation runs.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use sha2::{Digest, Sha256};

use super::config::{ExperimentConfig, Settings};
use crate::detector::{
    assign_targets, decode_detections, detection_loss, forward, init_params, predict, DecodeConfig, Detection,
    DetectionOutput, ModelConfig, Role,
};
use crate::distill::{
    classification_kd_loss, compute_vlr_weights, focal_distill_loss, global_distill_loss, init_reconstruction,
    sample_keep_mask, DistillWeights, RECON_PREFIX,
};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalResult};
use crate::geometry::AnchorGrid;
use crate::synth::{export_coco, generate_dataset, hflip, load_coco_annotations, read_ppm, write_ppm, Annotation, Dataset};
use crate::tensor::{load_checkpoint, save_checkpoint, Graph, LrSchedule, Optimizer, ParamBinder, ParamStore, Tensor, Var};

pub const METRICS_HEADER: &str = "epoch,cls,reg,dfl,kd_cls,kd_focal,kd_global,mAP,AP50,AP75,AP_S";
pub const METRICS_FILE: &str = "metrics.csv";
pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const CONFIG_FILE: &str = "config.txt";
pub const ENV_FILE: &str = "env.txt";
pub const EVAL_FILE: &str = "eval.json";

/// Offset of the first held-out scene index, keeping the splits disjoint.
pub const TEST_INDEX_OFFSET: u64 = 1 << 32;

// independent RNG streams of a run
const STREAM_INIT: u64 = 0;
const STREAM_RECON: u64 = 1;
const STREAM_ORDER: u64 = 2;
const STREAM_FLIP: u64 = 3;
const STREAM_MASK: u64 = 4;

fn stream(seed: u64, s: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(s);
    r
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataBundle {
    pub train: Dataset,
    pub test: Dataset,
}

pub fn prepare_data(s: &Settings) -> Result<DataBundle> {
    let data = match &s.data_dir {
        Some(dir) => DataBundle {
            train: load_dataset_dir(dir, "train")?,
            test: load_dataset_dir(dir, "test")?,
        },
        None => DataBundle {
            train: generate_dataset(&s.scene, "train", 0, s.train_images, s.threads)?,
            test: generate_dataset(&s.scene, "test", TEST_INDEX_OFFSET, s.test_images, s.threads)?,
        },
    };
    for ds in [&data.train, &data.test] {
        ds.validate()?;
        if ds.num_classes() != s.student.num_classes {
            return Err(Error::Config(format!(
                "dataset has {} classes, data.classes = {}",
                ds.num_classes(),
                s.student.num_classes
            )));
        }
        if ds.images.iter().any(|im| im.height != s.scene.height || im.width != s.scene.width) {
            return Err(Error::Config(format!(
                "dataset images must be {}x{} (data.height x data.width)",
                s.scene.height, s.scene.width
            )));
        }
    }
    Ok(data)
}

/// Writes `{split}.json` and the images as `images/{file_name}`.
pub fn write_dataset_dir(dir: &Path, ds: &Dataset) -> Result<()> {
    let img_dir = dir.join("images");
    fs::create_dir_all(&img_dir).map_err(|e| Error::io(&img_dir, e))?;
    let doc = dir.join(format!("{}.json", ds.split));
    fs::write(&doc, export_coco(ds)).map_err(|e| Error::io(&doc, e))?;
    for im in &ds.images {
        if let Some(px) = &im.pixels {
            let p = img_dir.join(&im.file_name);
            let mut f = fs::File::create(&p).map_err(|e| Error::io(&p, e))?;
            write_ppm(&mut f, px).map_err(|e| Error::io(&p, e))?;
        }
    }
    Ok(())
}

pub fn load_dataset_dir(dir: &Path, split: &str) -> Result<Dataset> {
    let doc = dir.join(format!("{split}.json"));
    let text = fs::read_to_string(&doc).map_err(|e| Error::io(&doc, e))?;
    let mut ds = load_coco_annotations(&text, split)?.dataset;
    for im in &mut ds.images {
        let p = dir.join("images").join(&im.file_name);
        let mut f = fs::File::open(&p).map_err(|e| Error::io(&p, e))?;
        let px = read_ppm(&mut f)?;
        if px.shape() != [3, im.height, im.width] {
            return Err(Error::Config(format!("{}: size disagrees with its annotation document", p.display())));
        }
        im.pixels = Some(px);
    }
    Ok(ds)
}

fn pixels(ds: &Dataset, i: usize) -> Result<&Tensor> {
    ds.images[i]
        .pixels
        .as_ref()
        .ok_or_else(|| Error::invalid(format!("image {} has no pixels", ds.images[i].file_name)))
}

/// Image and annotations of training sample `i`, optionally mirrored.
fn sample(ds: &Dataset, i: usize, flip: bool) -> Result<(Tensor, Vec<Annotation>)> {
    let px = pixels(ds, i)?;
    Ok(if flip {
        hflip(px, &ds.annotations[i])
    } else {
        (px.clone(), ds.annotations[i].clone())
    })
}

fn batch_of(images: &[Tensor]) -> Result<Tensor> {
    let mut shape = vec![images.len()];
    shape.extend_from_slice(images[0].shape());
    Tensor::new(shape, images.iter().flat_map(|t| t.data().iter().copied()).collect())
}

/// A frozen teacher with its predictions on the training split cached per orientation.
pub struct Teacher {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    outputs: Vec<Vec<DetectionOutput>>,
}

impl Teacher {
    /// Loads a checkpoint for `cfg`, rejecting one whose architecture differs. Works
    /// for either role.
    pub fn load_store(cfg: &ModelConfig, path: &Path) -> Result<ParamStore> {
        let values = load_checkpoint(path)?;
        let out_channels = |name: &str| values.get(name).map(|t| t.shape()[0]);
        let classes = out_channels("head.cls_pred.weight");
        let sides = out_channels("head.reg_pred.weight");
        if classes != Some(cfg.num_classes) || sides != Some(4 * cfg.bins) {
            return Err(Error::Config(format!(
                "{} predicts {classes:?} classes and {sides:?} distribution outputs; expected {} and {}",
                path.display(),
                cfg.num_classes,
                4 * cfg.bins
            )));
        }
        let mut store = init_params(cfg, &mut stream(0, STREAM_INIT))?;
        // a readable checkpoint of another architecture is a configuration mistake
        store
            .load_values(&values)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Ok(store)
    }

    pub fn new(cfg: ModelConfig, store: ParamStore, train: &Dataset, hflip: bool) -> Result<Self> {
        let mut outputs = Vec::with_capacity(train.len());
        for i in 0..train.len() {
            let mut per = Vec::with_capacity(2);
            for flip in [false, true].into_iter().take(1 + hflip as usize) {
                let (img, _) = sample(train, i, flip)?;
                per.push(predict(&cfg, &store, &batch_of(&[img])?)?);
            }
            outputs.push(per);
        }
        Ok(Teacher { cfg, store, outputs })
    }

    fn output(&self, i: usize, flip: bool) -> Result<&DetectionOutput> {
        self.outputs[i]
            .get(flip as usize)
            .ok_or_else(|| Error::invalid("teacher outputs were cached without flips"))
    }

    pub fn check_compatible(&self, student: &ModelConfig) -> Result<()> {
        if self.cfg.num_classes != student.num_classes || self.cfg.bins != student.bins || self.cfg.strides != student.strides {
            return Err(Error::Config(format!(
                "teacher (C={}, D={}, strides {:?}) is incompatible with the student (C={}, D={}, strides {:?})",
                self.cfg.num_classes, self.cfg.bins, self.cfg.strides, student.num_classes, student.bins, student.strides
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct LossSums {
    pub cls: f64,
    pub reg: f64,
    pub dfl: f64,
    pub kd_cls: f64,
    pub kd_focal: f64,
    pub kd_global: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// Mean per-step loss components.
    pub losses: LossSums,
    pub eval: EvalResult,
}

impl EpochMetrics {
    pub fn csv_row(&self) -> String {
        let l = &self.losses;
        let e = &self.eval;
        format!(
            "{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
            self.epoch, l.cls, l.reg, l.dfl, l.kd_cls, l.kd_focal, l.kd_global, e.map, e.ap50, e.ap75, e.ap_small
        )
    }
}

pub struct RunOutcome {
    pub dir: PathBuf,
    pub store: ParamStore,
    pub epochs: Vec<EpochMetrics>,
    /// Evaluation of the final weights (initial weights when no epoch ran).
    pub final_eval: EvalResult,
}

/// Detections of `store` on every image of `ds`.
pub fn detect_all(cfg: &ModelConfig, store: &ParamStore, ds: &Dataset, decode: &DecodeConfig) -> Result<Vec<Vec<Detection>>> {
    (0..ds.len())
        .map(|i| {
            let out = predict(cfg, store, &batch_of(&[pixels(ds, i)?.clone()])?)?;
            decode_detections(&out, ds.images[i].height, ds.images[i].width, decode)
        })
        .collect()
}

pub fn evaluate_model(cfg: &ModelConfig, store: &ParamStore, ds: &Dataset, decode: &DecodeConfig) -> Result<EvalResult> {
    let dets = detect_all(cfg, store, ds, decode)?;
    Ok(evaluate(&dets, &ds.annotations, cfg.num_classes))
}

/// Hex SHA-256 over the annotations and pixels of the splits.
pub fn data_fingerprint(data: &DataBundle) -> String {
    let mut h = Sha256::new();
    for ds in [&data.train, &data.test] {
        h.update(export_coco(ds).as_bytes());
        for im in &ds.images {
            if let Some(px) = &im.pixels {
                for v in px.data() {
                    h.update(v.to_le_bytes());
                }
            }
        }
    }
    hex::encode(h.finalize())
}

pub fn config_fingerprint(cfg: &ExperimentConfig) -> String {
    hex::encode(Sha256::digest(cfg.to_text().as_bytes()))
}

fn environment_text(data: &DataBundle, cfg: &ExperimentConfig) -> String {
    format!(
        "package {} {}\ntarget {}-{}\nendian {}\nconfig_sha256 {}\ndata_sha256 {}\n",
        env!("CARGO_PKG_NAME"),
        env!("CARGO_PKG_VERSION"),
        std::env::consts::ARCH,
        std::env::consts::OS,
        if cfg!(target_endian = "little") { "little" } else { "big" },
        config_fingerprint(cfg),
        data_fingerprint(data),
    )
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn scalar(g: &Graph, v: Var) -> f64 {
    g.value(v).data()[0] as f64
}

fn weighted(g: &mut Graph, total: Option<Var>, term: Var, w: f32) -> Result<Option<Var>> {
    if w == 0.0 {
        return Ok(total);
    }
    let t = g.mul_scalar(term, w);
    Ok(Some(match total {
        Some(x) => g.add(x, t)?,
        None => t,
    }))
}

/// Trains the model of `role`; with a teacher, the student is additionally distilled
/// using the terms enabled in `distill.*`. Writes the config snapshot, environment
/// fingerprint, per-epoch metrics and the final checkpoint into `dir`.
pub fn run_training(
    config: &ExperimentConfig,
    role: Role,
    data: &DataBundle,
    teacher: Option<&Teacher>,
    dir: &Path,
) -> Result<RunOutcome> {
    let s = config.resolve()?;
    let cfg = s.model(role).clone();
    if teacher.is_some() && role == Role::Teacher {
        return Err(Error::Config("only the student can be distilled".into()));
    }
    if let Some(t) = teacher {
        t.check_compatible(&cfg)?;
        if t.outputs.len() != data.train.len() {
            return Err(Error::invalid("teacher cache does not match the training split"));
        }
    }
    let kd = teacher.filter(|_| s.distill.any());

    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_file(&dir.join(CONFIG_FILE), &config.to_text())?;
    write_file(&dir.join(ENV_FILE), &environment_text(data, config))?;
    let metrics_path = dir.join(METRICS_FILE);
    let mut metrics = fs::File::create(&metrics_path).map_err(|e| Error::io(&metrics_path, e))?;
    writeln!(metrics, "{METRICS_HEADER}").map_err(|e| Error::io(&metrics_path, e))?;
    let ckpt = dir.join(CHECKPOINT_FILE);

    let mut store = init_params(&cfg, &mut stream(s.seed, STREAM_INIT))?;
    if kd.is_some() && s.distill.global {
        init_reconstruction(&mut store, 4 * cfg.bins, &mut stream(s.seed, STREAM_RECON));
    }
    let mut order_rng = stream(s.seed, STREAM_ORDER);
    let mut flip_rng = stream(s.seed, STREAM_FLIP);
    let mut mask_rng = stream(s.seed, STREAM_MASK);

    let grid = AnchorGrid::new(s.scene.height, s.scene.width, &cfg.strides)?;
    let mut assign_cfg = s.assign.clone();
    assign_cfg.bins = cfg.bins;
    let n = data.train.len();
    let steps_per_epoch = n.div_ceil(s.train.batch);
    let total_steps = s.train.epochs * steps_per_epoch;
    let schedule = LrSchedule::step_decay(s.train.lr, total_steps, s.train.warmup_steps.min(total_steps / 2));
    let mut opt = Optimizer::new(s.train.optimizer, s.train.weight_decay);
    let dp = &s.distill.params;

    let mut epochs = Vec::with_capacity(s.train.epochs);
    let mut step = 0usize;
    for epoch in 1..=s.train.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut order_rng);
        let mut sums = LossSums::default();
        for chunk in order.chunks(s.train.batch) {
            let mut images = Vec::with_capacity(chunk.len());
            let mut gts = Vec::with_capacity(chunk.len());
            let mut asg = Vec::with_capacity(chunk.len());
            let mut flips = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let flip = s.train.hflip && flip_rng.random_bool(0.5);
                let (img, anns) = sample(&data.train, i, flip)?;
                asg.push(assign_targets(&grid, &anns, &assign_cfg)?);
                images.push(img);
                gts.push(anns);
                flips.push(flip);
            }
            let mut g = Graph::new();
            let mut binder = ParamBinder::new(&store, true);
            let x = g.constant(batch_of(&images)?);
            let levels = forward(&mut g, &mut binder, &cfg, x)?;
            let det = detection_loss(&mut g, &levels, &grid.levels, &gts, &asg, cfg.bins)?;
            sums.cls += scalar(&g, det.cls);
            sums.reg += scalar(&g, det.reg);
            sums.dfl += scalar(&g, det.dfl);
            let mut total = weighted(&mut g, None, det.cls, s.train.w_cls)?;
            total = weighted(&mut g, total, det.reg, s.train.w_giou)?;
            total = weighted(&mut g, total, det.dfl, s.train.w_dfl)?;

            if let Some(t) = kd {
                let outs: Vec<&DetectionOutput> =
                    chunk.iter().zip(&flips).map(|(&i, &f)| t.output(i, f)).collect::<Result<_>>()?;
                let mut weights = Vec::with_capacity(chunk.len());
                for b in 0..chunk.len() {
                    let mut w: DistillWeights = compute_vlr_weights(outs[b], &grid, &gts[b], &asg[b], dp)?;
                    if !s.distill.vlr {
                        w.levels.iter_mut().for_each(|l| l.i_vlr.iter_mut().for_each(|v| *v = 0.0));
                    }
                    weights.push(w);
                }
                let stack = |f: &dyn Fn(&crate::detector::LevelOutput) -> &Tensor, l: usize| -> Result<Tensor> {
                    let parts: Vec<&Tensor> = outs.iter().map(|o| f(&o.levels[l])).collect();
                    let mut shape = parts[0].shape().to_vec();
                    shape[0] *= parts.len();
                    Tensor::new(shape, parts.iter().flat_map(|p| p.data().iter().copied()).collect())
                };
                let nl = levels.len();
                if s.distill.cls_kd {
                    let tc: Vec<Tensor> = (0..nl).map(|l| stack(&|o| &o.cls, l)).collect::<Result<_>>()?;
                    let sc: Vec<Var> = levels.iter().map(|l| l.cls).collect();
                    let v = classification_kd_loss(&mut g, &tc, &sc, &weights, dp.temperature, dp.cls_kd_vlr, dp.alpha)?;
                    sums.kd_cls += scalar(&g, v);
                    total = weighted(&mut g, total, v, s.distill.kd_cls_weight)?;
                }
                if s.distill.focal {
                    let tr: Vec<Tensor> = (0..nl).map(|l| stack(&|o| &o.reg, l)).collect::<Result<_>>()?;
                    let sr: Vec<Var> = levels.iter().map(|l| l.reg).collect();
                    let v = focal_distill_loss(&mut g, &tr, &sr, &weights, dp.alpha, dp.temperature, cfg.bins)?;
                    sums.kd_focal += scalar(&g, v);
                    total = weighted(&mut g, total, v, s.distill.loc_weight)?;
                }
                if s.distill.global {
                    let tm: Vec<Tensor> = (0..nl).map(|l| stack(&|o| &o.reg_map, l)).collect::<Result<_>>()?;
                    let sm: Vec<Var> = levels.iter().map(|l| l.reg_map).collect();
                    let masks: Vec<Tensor> = sm
                        .iter()
                        .map(|v| sample_keep_mask(g.shape(*v), dp.lambda, &mut mask_rng))
                        .collect::<Result<_>>()?;
                    let v = global_distill_loss(&mut g, &mut binder, &tm, &sm, &masks)?;
                    sums.kd_global += scalar(&g, v);
                    total = weighted(&mut g, total, v, s.distill.loc_weight * dp.beta)?;
                }
            }

            step += 1;
            let Some(total) = total else {
                continue;
            };
            let loss = scalar(&g, total);
            g.backward(total)?;
            let bindings = binder.into_bindings();
            store.zero_grad();
            store.accumulate_grads(&g, &bindings);
            let grads_finite = store.iter().all(|(_, p)| p.grad.all_finite());
            if !loss.is_finite() || !grads_finite {
                save_checkpoint(&ckpt, &detector_params(&store).values())?;
                return Err(Error::Diverged { epoch, step, saved: ckpt });
            }
            if s.train.grad_clip > 0.0 {
                let norm = store.grad_norm("");
                if norm > s.train.grad_clip {
                    let k = s.train.grad_clip / norm;
                    store.iter_mut().for_each(|(_, p)| p.grad.data_mut().iter_mut().for_each(|v| *v *= k));
                }
            }
            opt.step(&mut store, schedule.lr_at(step - 1), &[]);
        }
        let k = steps_per_epoch as f64;
        for v in [
            &mut sums.cls,
            &mut sums.reg,
            &mut sums.dfl,
            &mut sums.kd_cls,
            &mut sums.kd_focal,
            &mut sums.kd_global,
        ] {
            *v /= k;
        }
        let eval = evaluate_model(&cfg, &store, &data.test, &s.decode)?;
        let m = EpochMetrics {
            epoch,
            losses: sums,
            eval,
        };
        writeln!(metrics, "{}", m.csv_row()).map_err(|e| Error::io(&metrics_path, e))?;
        epochs.push(m);
    }
    save_checkpoint(&ckpt, &detector_params(&store).values())?;
    let final_eval = match epochs.last() {
        Some(m) => m.eval.clone(),
        None => evaluate_model(&cfg, &store, &data.test, &s.decode)?,
    };
    let summary = serde_json::to_string_pretty(&final_eval).expect("serialisable");
    write_file(&dir.join(EVAL_FILE), &summary)?;
    Ok(RunOutcome {
        dir: dir.to_path_buf(),
        store,
        epochs,
        final_eval,
    })
}

/// Parameters of the detector proper, without the reconstruction module.
pub fn detector_params(store: &ParamStore) -> ParamStore {
    let mut out = ParamStore::new();
    for (name, p) in store.iter() {
        if !name.starts_with(RECON_PREFIX) {
            out.insert(name.clone(), p.value.clone());
        }
    }
    out
}
