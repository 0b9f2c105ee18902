//! Command-line entry point. Exit codes: 0 success, 1 configuration error, 2 runtime failure.

use std::fs;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use super::ablation::{run_ablation, Sweep};
use super::config::{ExperimentConfig, Settings};
use super::report::{flop_summary, light_ml_delta, run_stats};
use super::runner::{
    detect_all, evaluate_model, prepare_data, run_training, write_dataset_dir, DataBundle, Teacher, EVAL_FILE,
};
use crate::detector::Role;
use crate::error::{Error, Result};
use crate::lightml::LightMLParams;
use crate::synth::generate_dataset;

#[derive(Debug, Parser)]
#[command(name = "cidkd", version, about = "Dense small-object detection with teacher-student distillation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Configuration file of `key = value` lines.
    #[arg(long, short)]
    pub config: Option<PathBuf>,
    /// Override a key, e.g. `--set distill.gamma=0.5`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Shorthand for `--set seed=N`.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Shorthand for `--set output.dir=DIR`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Shorthand for `--set train.epochs=N`.
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Shorthand for `--set teacher.checkpoint=FILE`.
    #[arg(long)]
    pub teacher: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic splits as COCO documents plus PPM images.
    GenData(Common),
    /// Train the teacher detector.
    TrainTeacher(Common),
    /// Train the student detector without distillation.
    TrainStudent(Common),
    /// Train the student with the frozen teacher from `teacher.checkpoint`.
    Distill(Common),
    /// Evaluate a checkpoint on the held-out split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Architecture of the checkpoint.
        #[arg(long, default_value = "student", value_parser = ["student", "teacher"])]
        role: String,
        /// Also write the detections as JSON.
        #[arg(long)]
        detections: bool,
    },
    /// Sweep configuration keys and tabulate the results.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Axis `key=v1,v2,...`; repeatable. Axes combine as a cartesian product.
        #[arg(long = "sweep", value_name = "KEY=VALUES")]
        axes: Vec<String>,
        /// File with one axis per line.
        #[arg(long)]
        sweep_file: Option<PathBuf>,
        /// Only count FLOPs; do not train.
        #[arg(long)]
        flops_only: bool,
    },
    /// Anchor overlap, positive-area and cosine-distance statistics.
    Stats {
        #[command(flatten)]
        common: Common,
        /// Use the training split instead of the held-out split.
        #[arg(long)]
        train_split: bool,
        /// Images for which cosine maps are written (needs both checkpoints).
        #[arg(long, default_value_t = 8)]
        cosine_images: usize,
    },
    /// FLOP counts of the configured models, or of Light-ML alone with `--channels`.
    Flops {
        #[command(flatten)]
        common: Common,
        /// Head channels for a stand-alone Light-ML count.
        #[arg(long)]
        channels: Option<usize>,
        /// Pyramid strides for the stand-alone count.
        #[arg(long, value_delimiter = ',', default_value = "8,16,32,64,128")]
        strides: Vec<usize>,
        /// Input `HEIGHTxWIDTH` for the stand-alone count.
        #[arg(long, default_value = "800x1333")]
        input: String,
    },
}

fn load_config(c: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &c.config {
        Some(p) => ExperimentConfig::parse(&fs::read_to_string(p).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?)?,
        None => ExperimentConfig::default(),
    };
    for o in &c.overrides {
        cfg.apply(o)?;
    }
    if let Some(s) = c.seed {
        cfg.set("seed", &s.to_string())?;
    }
    if let Some(o) = &c.out {
        cfg.set("output.dir", &o.to_string_lossy())?;
    }
    if let Some(e) = c.epochs {
        cfg.set("train.epochs", &e.to_string())?;
    }
    if let Some(t) = &c.teacher {
        cfg.set("teacher.checkpoint", &t.to_string_lossy())?;
    }
    Ok(cfg)
}

fn teacher_for(s: &Settings, data: &DataBundle) -> Result<Teacher> {
    let path = s
        .teacher_checkpoint
        .as_ref()
        .ok_or_else(|| Error::Config("distillation needs teacher.checkpoint (or --teacher)".into()))?;
    if !path.exists() {
        return Err(Error::Config(format!("teacher checkpoint {} does not exist", path.display())));
    }
    let store = Teacher::load_store(&s.teacher, path)?;
    Teacher::new(s.teacher.clone(), store, &data.train, s.train.hflip)
}

fn print_json(v: &impl serde::Serialize) {
    println!("{}", serde_json::to_string_pretty(v).expect("serialisable"));
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(c) => {
            let cfg = load_config(&c)?;
            let s = cfg.resolve()?;
            let data = if s.data_dir.is_some() {
                prepare_data(&s)?
            } else {
                DataBundle {
                    train: generate_dataset(&s.scene, "train", 0, s.train_images, s.threads)?,
                    test: generate_dataset(&s.scene, "test", super::runner::TEST_INDEX_OFFSET, s.test_images, s.threads)?,
                }
            };
            write_dataset_dir(&s.output_dir, &data.train)?;
            write_dataset_dir(&s.output_dir, &data.test)?;
            println!(
                "wrote {} train and {} test images to {} (foreground fraction {:.4})",
                data.train.len(),
                data.test.len(),
                s.output_dir.display(),
                data.train.foreground_fraction()
            );
        }
        Command::TrainTeacher(c) => train(&c, Role::Teacher, false)?,
        Command::TrainStudent(c) => train(&c, Role::Student, false)?,
        Command::Distill(c) => train(&c, Role::Student, true)?,
        Command::Eval {
            common,
            checkpoint,
            role,
            detections,
        } => {
            let cfg = load_config(&common)?;
            let s = cfg.resolve()?;
            let data = prepare_data(&s)?;
            let model = if role == "teacher" { &s.teacher } else { &s.student };
            let store = Teacher::load_store(model, &checkpoint)?;
            let r = evaluate_model(model, &store, &data.test, &s.decode)?;
            fs::create_dir_all(&s.output_dir).map_err(|e| Error::io(&s.output_dir, e))?;
            let p = s.output_dir.join(EVAL_FILE);
            fs::write(&p, serde_json::to_string_pretty(&r).expect("serialisable")).map_err(|e| Error::io(&p, e))?;
            if detections {
                let dets = detect_all(model, &store, &data.test, &s.decode)?;
                let rows: Vec<Vec<(f32, f32, f32, f32, usize, f32)>> = dets
                    .iter()
                    .map(|d| d.iter().map(|x| (x.bbox.x1, x.bbox.y1, x.bbox.x2, x.bbox.y2, x.class, x.score)).collect())
                    .collect();
                let p = s.output_dir.join("detections.json");
                fs::write(&p, serde_json::to_string(&rows).expect("serialisable")).map_err(|e| Error::io(&p, e))?;
            }
            print_json(&r);
        }
        Command::Ablate {
            common,
            axes,
            sweep_file,
            flops_only,
        } => {
            let cfg = load_config(&common)?;
            let s = cfg.resolve()?;
            let mut sweep = match &sweep_file {
                Some(p) => Sweep::parse(&fs::read_to_string(p).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?)?,
                None => Sweep::default(),
            };
            for a in &axes {
                sweep.add(a)?;
            }
            let rows = if flops_only {
                run_ablation(&cfg, &sweep, None, None, &s.output_dir)?
            } else {
                let data = prepare_data(&s)?;
                let teacher = match &s.teacher_checkpoint {
                    Some(_) => Some(teacher_for(&s, &data)?),
                    None => None,
                };
                run_ablation(&cfg, &sweep, Some(&data), teacher.as_ref(), &s.output_dir)?
            };
            print!("{}", super::ablation::ablation_csv(&sweep, &rows));
        }
        Command::Stats {
            common,
            train_split,
            cosine_images,
        } => {
            let cfg = load_config(&common)?;
            let s = cfg.resolve()?;
            let data = prepare_data(&s)?;
            let ds = if train_split { &data.train } else { &data.test };
            let load = Teacher::load_store;
            let stores = match (&s.teacher_checkpoint, &s.student_checkpoint) {
                (Some(t), Some(u)) => Some((load(&s.teacher, t)?, load(&s.student, u)?)),
                _ => None,
            };
            let models = stores.as_ref().map(|(t, u)| (&s.teacher, t, &s.student, u));
            print_json(&run_stats(&s, ds, models, cosine_images, &s.output_dir)?);
        }
        Command::Flops {
            common,
            channels,
            strides,
            input,
        } => {
            let cfg = load_config(&common)?;
            match channels {
                Some(c) => {
                    let (h, w) = input
                        .split_once('x')
                        .and_then(|(h, w)| Some((h.parse().ok()?, w.parse().ok()?)))
                        .ok_or_else(|| Error::Config(format!("--input {input:?} is not HEIGHTxWIDTH")))?;
                    let ratio: f32 = cfg.get("student.light_ml.ratio").parse().expect("validated");
                    let p = LightMLParams {
                        ratio,
                        ..LightMLParams::default()
                    };
                    let r = light_ml_delta(c, &p, &strides, (h, w))?;
                    for l in &r.layers {
                        println!("{:<24} {:>16}", l.name, l.flops);
                    }
                    println!("{:<24} {:>16} ({:.3} GFLOPs)", "total", r.total, r.gflops());
                }
                None => {
                    // a seed is not needed for counting
                    let mut cfg = cfg;
                    if cfg.get("seed").is_empty() {
                        cfg.set("seed", "0")?;
                    }
                    print_json(&flop_summary(&cfg.resolve()?)?);
                }
            }
        }
    }
    Ok(())
}

fn train(c: &Common, role: Role, distill: bool) -> Result<()> {
    let cfg = load_config(c)?;
    let s = cfg.resolve()?;
    let data = prepare_data(&s)?;
    let teacher = if distill { Some(teacher_for(&s, &data)?) } else { None };
    let out = run_training(&cfg, role, &data, teacher.as_ref(), &s.output_dir)?;
    print_json(&out.final_eval);
    Ok(())
}
