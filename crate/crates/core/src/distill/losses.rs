use rand::Rng;

use super::DistillWeights;
use crate::error::{Error, Result};
use crate::tensor::{softmax_in_place, Graph, ParamBinder, ParamStore, Tensor, Var};

pub const RECON_PREFIX: &str = "distill.recon";

fn softened(logits: &[f32], k: usize, tau: f32) -> Vec<f32> {
    let mut p: Vec<f32> = logits.iter().map(|v| v / tau).collect();
    p.chunks_mut(k).for_each(softmax_in_place);
    p
}

fn check_levels(teacher: &[Tensor], student: &[Var], g: &Graph, weights: &[DistillWeights]) -> Result<()> {
    if teacher.len() != student.len() {
        return Err(Error::invalid("teacher and student level counts differ"));
    }
    for (t, s) in teacher.iter().zip(student) {
        if t.shape() != g.shape(*s) {
            return Err(Error::ShapeMismatch {
                op: "distillation (teacher vs student)",
                lhs: t.shape().to_vec(),
                rhs: g.shape(*s).to_vec(),
            });
        }
    }
    if weights.iter().any(|w| w.levels.len() != teacher.len()) {
        return Err(Error::invalid("weight maps do not match the level count"));
    }
    Ok(())
}

/// Per-row weights `f(level weights, anchor) / (batch * anchors_in_level * levels)`.
fn row_weights(weights: &[DistillWeights], level: usize, levels: usize, f: impl Fn(f32, f32) -> f32) -> Vec<f32> {
    let batch = weights.len();
    let n = weights[0].levels[level].i_main.len();
    let norm = 1.0 / (batch * n * levels) as f32;
    weights
        .iter()
        .flat_map(|w| {
            let lw = &w.levels[level];
            lw.i_main.iter().zip(&lw.i_vlr).map(|(m, v)| f(*m, *v) * norm).collect::<Vec<_>>()
        })
        .collect()
}

/// Weighted temperature-scaled KL divergence between teacher and student side
/// distributions, summed over the four sides.
///
/// `teacher[l]` and `student[l]` hold `(B*n) x 4D` logits; `weights[b]` is image `b`'s
/// weight map. Each anchor contributes `(i_main + alpha * i_vlr) * tau^2 * KL`, averaged over
/// the anchors of its level and then over levels.
pub fn focal_distill_loss(
    g: &mut Graph,
    teacher: &[Tensor],
    student: &[Var],
    weights: &[DistillWeights],
    alpha: f32,
    tau: f32,
    bins: usize,
) -> Result<Var> {
    check_levels(teacher, student, g, weights)?;
    let levels = teacher.len();
    let mut total: Option<Var> = None;
    for l in 0..levels {
        let rows = teacher[l].shape()[0];
        let w = row_weights(weights, l, levels, |m, v| m + alpha * v);
        if w.len() != rows {
            return Err(Error::invalid(format!("level {l}: {} weights for {rows} rows", w.len())));
        }
        let side_w: Vec<f32> = w.iter().flat_map(|x| [*x; 4]).collect();
        let sides = g.reshape(student[l], &[rows * 4, bins])?;
        let target = Tensor::new(vec![rows * 4, bins], softened(teacher[l].data(), bins, tau))?;
        let term = g.softmax_cross_entropy(sides, &target, &side_w, tau, true)?;
        total = Some(match total {
            Some(t) => g.add(t, term)?,
            None => term,
        });
    }
    total.ok_or_else(|| Error::invalid("no levels to distill"))
}

/// Temperature-scaled KL over classes per anchor, weighted by `i_main` (plus
/// `alpha * i_vlr` when `use_vlr`), with the same normalisation as the focal term.
pub fn classification_kd_loss(
    g: &mut Graph,
    teacher: &[Tensor],
    student: &[Var],
    weights: &[DistillWeights],
    tau: f32,
    use_vlr: bool,
    alpha: f32,
) -> Result<Var> {
    check_levels(teacher, student, g, weights)?;
    let levels = teacher.len();
    let mut total: Option<Var> = None;
    for l in 0..levels {
        let k = teacher[l].shape()[1];
        let w = row_weights(weights, l, levels, |m, v| if use_vlr { m + alpha * v } else { m });
        let target = Tensor::new(teacher[l].shape().to_vec(), softened(teacher[l].data(), k, tau))?;
        let term = g.softmax_cross_entropy(student[l], &target, &w, tau, true)?;
        total = Some(match total {
            Some(t) => g.add(t, term)?,
            None => term,
        });
    }
    total.ok_or_else(|| Error::invalid("no levels to distill"))
}

/// Registers the two-conv reconstruction module for maps with `channels` channels.
pub fn init_reconstruction(store: &mut ParamStore, channels: usize, rng: &mut impl Rng) {
    let std = (2.0 / (channels * 9) as f32).sqrt();
    for i in 0..2 {
        store.insert(
            format!("{RECON_PREFIX}.conv{i}.weight"),
            Tensor::randn(&[channels, channels, 3, 3], std, rng),
        );
        store.insert(format!("{RECON_PREFIX}.conv{i}.bias"), Tensor::zeros(&[channels]));
    }
}

fn reconstruct(g: &mut Graph, params: &mut ParamBinder, x: Var) -> Result<Var> {
    let mut h = x;
    for i in 0..2 {
        let w = params.get(g, &format!("{RECON_PREFIX}.conv{i}.weight"))?;
        let b = params.get(g, &format!("{RECON_PREFIX}.conv{i}.bias"))?;
        let y = g.conv2d(h, w, 1, 1)?;
        h = g.add_channel_bias(y, b)?;
        if i == 0 {
            h = g.relu(h);
        }
    }
    Ok(h)
}

/// Per-pixel keep mask of shape `N x 1 x H x W`: 1 with probability `1 - lambda`.
pub fn sample_keep_mask(shape: &[usize], lambda: f32, rng: &mut impl Rng) -> Result<Tensor> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Config(format!("mask ratio {lambda} outside [0, 1]")));
    }
    let (n, h, w) = (shape[0], shape[2], shape[3]);
    let keep = 1.0 - lambda as f64;
    Ok(Tensor::from_fn(&[n, 1, h, w], |_| if rng.random::<f64>() < keep { 1.0 } else { 0.0 }))
}

/// Mean Smooth-L1 between the teacher map and the reconstruction of the masked student
/// map, averaged over levels. `masks[l]` is an `N x 1 x H x W` keep mask broadcast over
/// channels.
pub fn global_distill_loss(
    g: &mut Graph,
    params: &mut ParamBinder,
    teacher: &[Tensor],
    student: &[Var],
    masks: &[Tensor],
) -> Result<Var> {
    if teacher.len() != student.len() || masks.len() != student.len() || teacher.is_empty() {
        return Err(Error::invalid("global distillation: level counts differ"));
    }
    let levels = teacher.len() as f32;
    let mut total: Option<Var> = None;
    for ((t, s), m) in teacher.iter().zip(student).zip(masks) {
        let shape = g.shape(*s).to_vec();
        if t.shape() != shape.as_slice() {
            return Err(Error::ShapeMismatch {
                op: "global_distill_loss (teacher vs student)",
                lhs: t.shape().to_vec(),
                rhs: shape,
            });
        }
        let mv = g.constant(m.clone());
        let mb = g.broadcast_to(mv, &shape)?;
        let masked = g.mul(*s, mb)?;
        let rec = reconstruct(g, params, masked)?;
        let tv = g.constant(t.clone());
        let diff = g.sub(rec, tv)?;
        let sl = g.smooth_l1(diff);
        let term = g.mean(sl);
        let term = g.mul_scalar(term, 1.0 / levels);
        total = Some(match total {
            Some(x) => g.add(x, term)?,
            None => term,
        });
    }
    Ok(total.expect("non-empty"))
}

/// `L_f + beta * L_g`.
pub fn localization_distill_loss(g: &mut Graph, focal: Var, global: Var, beta: f32) -> Result<Var> {
    let scaled = g.mul_scalar(global, beta);
    g.add(focal, scaled)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distill::LevelWeights;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn one_anchor(i_main: f32, i_vlr: f32) -> DistillWeights {
        DistillWeights {
            levels: vec![LevelWeights {
                stride: 8,
                height: 1,
                width: 1,
                i_main: vec![i_main],
                i_vlr: vec![i_vlr],
            }],
        }
    }

    #[test]
    fn focal_kl_against_uniform_student() {
        // teacher one-hot at bin 0 for one side, uniform elsewhere; student uniform over 4 bins
        let mut t = vec![0.0f32; 16];
        t[0] = 1e4;
        let teacher = Tensor::new(vec![1, 16], t).unwrap();
        let mut g = Graph::new();
        let s = g.param(Tensor::zeros(&[1, 16]));
        let l = focal_distill_loss(&mut g, &[teacher], &[s], &[one_anchor(1.0, 0.0)], 1.0, 1.0, 4).unwrap();
        assert!((g.value(l).item() - 4.0f32.ln()).abs() < 1e-5);
    }

    #[test]
    fn zero_weights_and_equal_outputs_give_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let t = Tensor::randn(&[1, 32], 1.0, &mut rng);
        let mut g = Graph::new();
        let s = g.param(t.clone());
        let l = focal_distill_loss(&mut g, &[t.clone()], &[s], &[one_anchor(1.0, 1.0)], 1.0, 10.0, 8).unwrap();
        assert!(g.value(l).item().abs() < 1e-4);
        let other = g.param(Tensor::randn(&[1, 32], 1.0, &mut rng));
        let l = focal_distill_loss(&mut g, &[t], &[other], &[one_anchor(0.0, 0.0)], 1.0, 10.0, 8).unwrap();
        assert_eq!(g.value(l).item(), 0.0);
    }

    #[test]
    fn global_with_identity_reconstruction() {
        let mut store = ParamStore::new();
        let c = 2;
        for i in 0..2 {
            let mut w = Tensor::zeros(&[c, c, 3, 3]);
            for o in 0..c {
                w.data_mut()[((o * c + o) * 3 + 1) * 3 + 1] = 1.0;
            }
            store.insert(format!("{RECON_PREFIX}.conv{i}.weight"), w);
            store.insert(format!("{RECON_PREFIX}.conv{i}.bias"), Tensor::zeros(&[c]));
        }
        let map = Tensor::from_fn(&[1, c, 3, 3], |i| 0.1 * i as f32);
        let ones = Tensor::ones(&[1, 1, 3, 3]);
        let mut g = Graph::new();
        let mut p = ParamBinder::new(&store, true);
        let s = g.param(map.clone());
        let l = global_distill_loss(&mut g, &mut p, &[map.clone()], &[s], &[ones.clone()]).unwrap();
        assert!(g.value(l).item().abs() < 1e-7);

        let shifted = Tensor::from_fn(&[1, c, 3, 3], |i| 0.1 * i as f32 + 0.5);
        let l = global_distill_loss(&mut g, &mut p, &[shifted], &[s], &[ones]).unwrap();
        assert!((g.value(l).item() - 0.125).abs() < 1e-6);
    }

    #[test]
    fn fully_masked_student_gets_no_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        init_reconstruction(&mut store, 2, &mut rng);
        let mask = sample_keep_mask(&[1, 2, 4, 4], 1.0, &mut rng).unwrap();
        assert!(mask.data().iter().all(|v| *v == 0.0));
        let mut g = Graph::new();
        let mut p = ParamBinder::new(&store, true);
        let s = g.param(Tensor::randn(&[1, 2, 4, 4], 1.0, &mut rng));
        let t = Tensor::randn(&[1, 2, 4, 4], 1.0, &mut rng);
        let l = global_distill_loss(&mut g, &mut p, &[t], &[s], &[mask]).unwrap();
        g.backward(l).unwrap();
        assert!(g.grad(s).unwrap().data().iter().all(|v| *v == 0.0));
        assert!(sample_keep_mask(&[1, 1, 1, 1], 1.5, &mut rng).is_err());
    }

    #[test]
    fn localization_combination() {
        let mut g = Graph::new();
        let f = g.constant(Tensor::scalar(2.0));
        let gl = g.constant(Tensor::scalar(0.5));
        let l = localization_distill_loss(&mut g, f, gl, 4.0).unwrap();
        assert_eq!(g.value(l).item(), 4.0);
        let l = localization_distill_loss(&mut g, f, gl, 0.0).unwrap();
        assert_eq!(g.value(l).item(), 2.0);
    }
}
