//! Suites shared by the focused test files and the acceptance gate.
#![allow(dead_code)]

pub mod grad;
pub mod invariants;
pub mod oracle;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Outcome of one named check.
#[derive(Debug, Clone)]
pub struct Outcome {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Outcome {
    pub fn new(name: impl Into<String>, passed: bool, detail: impl Into<String>) -> Self {
        Outcome {
            name: name.into(),
            passed,
            detail: detail.into(),
        }
    }
}

pub fn failures(outcomes: &[Outcome]) -> Vec<&Outcome> {
    outcomes.iter().filter(|o| !o.passed).collect()
}

use cidkd::experiment::ExperimentConfig;

/// A run small enough for a test: eight 32x32 training images.
pub fn tiny_config(seed: u64, dir: &std::path::Path) -> ExperimentConfig {
    let mut c = ExperimentConfig::default();
    for kv in [
        format!("seed={seed}"),
        format!("output.dir={}", dir.display()),
        "data.train_images=8".into(),
        "data.test_images=4".into(),
        "data.height=32".into(),
        "data.width=32".into(),
        "data.max_size=8".into(),
        "data.max_objects=3".into(),
        "train.epochs=2".into(),
        "train.warmup_steps=4".into(),
    ] {
        c.apply(&kv).unwrap();
    }
    c
}
