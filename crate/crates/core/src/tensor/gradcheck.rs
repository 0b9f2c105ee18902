//! Central finite-difference checks of analytic gradients.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Graph, Tensor, Var};
use crate::error::Result;

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    pub epsilon: f32,
    pub seed: u64,
    /// Coordinates checked per input; larger inputs are subsampled.
    pub max_coords: usize,
    /// Floor of the error denominator, so an all-zero gradient compares sensibly.
    pub abs_floor: f64,
    pub max_resamples: usize,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            epsilon: 1e-3,
            seed: 0,
            max_coords: 48,
            abs_floor: 1e-2,
            max_resamples: 8,
        }
    }
}

#[derive(Clone, Debug)]
pub struct InputReport {
    pub index: usize,
    pub checked: usize,
    pub max_rel_err: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub name: String,
    pub inputs: Vec<InputReport>,
    pub max_rel_err: f64,
    /// How many times the sample point was moved off a non-differentiable point.
    pub resamples: usize,
    pub notes: Vec<String>,
}

impl GradCheckReport {
    pub fn passed(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }
}

fn output_weights(n: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
    (0..n).map(|_| rng.random_range(-1.0f32..1.0)).collect()
}

fn evaluate<F>(inputs: &[Tensor], build: &F, weights: &Option<Vec<f32>>) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::inference();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), false)).collect();
    let out = build(&mut g, &vars)?;
    let loss = match weights {
        Some(w) => g.weighted_sum(out, w.clone())?,
        None => out,
    };
    Ok(g.scalar_f64(loss))
}

/// Compares analytic gradients of `build` (reduced to a scalar through a fixed random
/// weighting when it returns a non-scalar) against central differences for every input.
///
/// The error of a coordinate is its absolute deviation over the largest gradient magnitude
/// of the same input, so single-precision rounding in small components does not dominate.
pub fn check_gradients<F>(name: &str, inputs: &[Tensor], build: F, cfg: &GradCheckConfig) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut point: Vec<Tensor> = inputs.to_vec();
    let mut resamples = 0;
    let mut notes = Vec::new();

    loop {
        let mut g = Graph::new();
        let vars: Vec<Var> = point.iter().map(|t| g.param(t.clone())).collect();
        let out = build(&mut g, &vars)?;
        let weights = if g.value(out).is_scalar() {
            None
        } else {
            Some(output_weights(g.value(out).numel(), &mut rng))
        };
        let loss = match &weights {
            Some(w) => g.weighted_sum(out, w.clone())?,
            None => out,
        };
        g.backward(loss)?;
        let base = g.scalar_f64(loss);

        let mut reports = Vec::new();
        let mut kinks: Vec<(usize, usize)> = Vec::new();
        for (i, v) in vars.iter().enumerate() {
            let n = point[i].numel();
            let analytic = g.grad(*v).map(|t| t.data().to_vec()).unwrap_or_else(|| vec![0.0; n]);
            let coords: Vec<usize> = if n <= cfg.max_coords {
                (0..n).collect()
            } else {
                let mut c = sample(&mut rng, n, cfg.max_coords).into_vec();
                c.sort_unstable();
                c
            };
            let mut probes = Vec::with_capacity(coords.len());
            for &j in &coords {
                let x0 = point[i].data()[j];
                let central = |h: f32| -> Result<(f64, f64, f64)> {
                    let mut probe = point.clone();
                    probe[i].data_mut()[j] = x0 + h;
                    let xp = probe[i].data()[j] as f64;
                    let fp = evaluate(&probe, &build, &weights)?;
                    probe[i].data_mut()[j] = x0 - h;
                    let xm = probe[i].data()[j] as f64;
                    let fm = evaluate(&probe, &build, &weights)?;
                    Ok(((fp - fm) / (xp - xm), (fp - base) / (xp - x0 as f64), (base - fm) / (x0 as f64 - xm)))
                };
                let (numeric, d_plus, d_minus) = central(cfg.epsilon)?;
                if (d_plus - d_minus).abs() > 0.05 * d_plus.abs().max(d_minus.abs()) + 1e-3 {
                    kinks.push((i, j));
                    continue;
                }
                let (half, _, _) = central(0.5 * cfg.epsilon)?;
                probes.push((j, analytic[j] as f64, numeric, half));
            }
            let scale = analytic
                .iter()
                .map(|a| (*a as f64).abs())
                .chain(probes.iter().map(|p| p.2.abs()))
                .fold(cfg.abs_floor, f64::max);
            let mut worst = 0.0f64;
            for &(j, a, numeric, half) in &probes {
                let dev = (a - numeric).abs();
                // a difference quotient that still moves with the step straddles a curvature kink
                if dev > 1e-4 * scale && (numeric - half).abs() >= 0.5 * dev {
                    kinks.push((i, j));
                    continue;
                }
                worst = worst.max(dev / scale);
            }
            reports.push(InputReport {
                index: i,
                checked: coords.len(),
                max_rel_err: worst,
            });
        }

        if kinks.is_empty() || resamples >= cfg.max_resamples {
            if !kinks.is_empty() {
                notes.push(format!(
                    "{} coordinate(s) still at a non-differentiable point after {resamples} resamples; skipped",
                    kinks.len()
                ));
            }
            let max_rel_err = reports.iter().map(|r| r.max_rel_err).fold(0.0, f64::max);
            return Ok(GradCheckReport {
                name: name.to_string(),
                inputs: reports,
                max_rel_err,
                resamples,
                notes,
            });
        }
        resamples += 1;
        notes.push(format!("resampled {} coordinate(s) near a kink", kinks.len()));
        for (i, j) in kinks {
            let shift = rng.random_range(-0.1f32..0.1);
            point[i].data_mut()[j] += shift;
        }
    }
}
