use std::collections::BTreeMap;

use super::ParamStore;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum OptimizerKind {
    Sgd { momentum: f32 },
    Adam { beta1: f32, beta2: f32, eps: f32 },
}

/// Linear warm-up followed by step decay (x0.1 at each milestone).
#[derive(Clone, Debug, PartialEq)]
pub struct LrSchedule {
    pub base_lr: f32,
    pub warmup_steps: usize,
    pub warmup_ratio: f32,
    pub milestones: Vec<usize>,
    pub decay: f32,
}

impl LrSchedule {
    /// Milestones at 2/3 and 11/12 of training.
    pub fn step_decay(base_lr: f32, total_steps: usize, warmup_steps: usize) -> Self {
        LrSchedule {
            base_lr,
            warmup_steps,
            warmup_ratio: 0.1,
            milestones: vec![total_steps * 2 / 3, total_steps * 11 / 12],
            decay: 0.1,
        }
    }

    pub fn lr_at(&self, step: usize) -> f32 {
        let decays = self.milestones.iter().filter(|m| step >= **m).count() as i32;
        let mut lr = self.base_lr * self.decay.powi(decays);
        if step < self.warmup_steps {
            let frac = step as f32 / self.warmup_steps as f32;
            lr *= self.warmup_ratio + (1.0 - self.warmup_ratio) * frac;
        }
        lr
    }
}

#[derive(Clone, Debug)]
pub struct Optimizer {
    kind: OptimizerKind,
    weight_decay: f32,
    step: u64,
    first: BTreeMap<String, Vec<f32>>,
    second: BTreeMap<String, Vec<f32>>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, weight_decay: f32) -> Self {
        Optimizer {
            kind,
            weight_decay,
            step: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        }
    }

    /// Applies one update to every parameter whose name starts with one of `prefixes`
    /// (all parameters when `prefixes` is empty). Gradients are left untouched.
    pub fn step(&mut self, store: &mut ParamStore, lr: f32, prefixes: &[&str]) {
        self.step += 1;
        let t = self.step as i32;
        for (name, p) in store.iter_mut() {
            if !prefixes.is_empty() && !prefixes.iter().any(|pre| name.starts_with(pre)) {
                continue;
            }
            let n = p.value.numel();
            // decay weights only, not biases
            let wd = if p.value.ndim() > 1 { self.weight_decay } else { 0.0 };
            let m = self.first.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            let value = p.value.data_mut();
            let grad = p.grad.data();
            match self.kind {
                OptimizerKind::Sgd { momentum } => {
                    for i in 0..n {
                        let gi = grad[i] + wd * value[i];
                        m[i] = momentum * m[i] + gi;
                        value[i] -= lr * m[i];
                    }
                }
                OptimizerKind::Adam { beta1, beta2, eps } => {
                    let v = self.second.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
                    let bc1 = 1.0 - beta1.powi(t);
                    let bc2 = 1.0 - beta2.powi(t);
                    for i in 0..n {
                        let gi = grad[i];
                        m[i] = beta1 * m[i] + (1.0 - beta1) * gi;
                        v[i] = beta2 * v[i] + (1.0 - beta2) * gi * gi;
                        let update = (m[i] / bc1) / ((v[i] / bc2).sqrt() + eps);
                        value[i] -= lr * (update + wd * value[i]);
                    }
                }
            }
        }
    }
}
