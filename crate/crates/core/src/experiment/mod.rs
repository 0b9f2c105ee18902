//! Configuration, training runs, sweeps and reports.

pub mod ablation;
pub mod cli;
pub mod config;
pub mod report;
pub mod runner;

pub use ablation::{run_ablation, Sweep, SWEEP_KEYS};
pub use config::{ExperimentConfig, Settings, KEYS};
pub use report::{flop_summary, light_ml_delta, run_stats, StatsSummary};
pub use runner::{evaluate_model, prepare_data, run_training, DataBundle, EpochMetrics, RunOutcome, Teacher};
