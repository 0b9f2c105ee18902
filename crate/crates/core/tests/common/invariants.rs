//! Structural properties of the head module and the region weights.

use cidkd::detector::{assign_targets, forward, init_params, AssignConfig, DetectionOutput, LevelOutput, ModelConfig};
use cidkd::distill::{compute_vlr_weights, DistillConfig, DistillWeights, VlrMode};
use cidkd::geometry::{AnchorGrid, BBox};
use cidkd::lightml::{channel_shuffle, init_params as init_light_ml, light_ml_forward, shuffle_permutation, LightMLParams};
use cidkd::synth::Annotation;
use cidkd::tensor::{Graph, ParamBinder, ParamStore, Tensor};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::oracle::{random_vlr_scene, vlr_config, VlrScene};
use super::Outcome;

pub const LIGHT_ML_RATIOS: [f32; 5] = [0.0, 0.25, 0.5, 0.75, 1.0];

/// The index map is a bijection, the op applies it, and `c / groups` groups undo it.
pub fn check_shuffle(channels: usize, groups: usize) -> Result<(), String> {
    let perm = shuffle_permutation(channels, groups).map_err(|e| e.to_string())?;
    let mut seen = vec![false; channels];
    for &p in &perm {
        if p >= channels || seen[p] {
            return Err(format!("{channels}/{groups}: {perm:?} is not a permutation"));
        }
        seen[p] = true;
    }
    let mut g = Graph::inference();
    let x = g.constant(Tensor::from_fn(&[1, channels, 1, 2], |i| (i / 2) as f32));
    let y = channel_shuffle(&mut g, x, groups).map_err(|e| e.to_string())?;
    for (i, &p) in perm.iter().enumerate() {
        if g.value(y).data()[2 * i] != p as f32 {
            return Err(format!("{channels}/{groups}: channel {i} does not hold input {p}"));
        }
    }
    let back = channel_shuffle(&mut g, y, channels / groups).map_err(|e| e.to_string())?;
    if g.value(back).data() != g.value(x).data() {
        return Err(format!("{channels}/{groups}: the transposed shuffle does not invert"));
    }
    Ok(())
}

pub fn check_light_ml_shapes(ratio: f32, channels: usize, h: usize, w: usize, rng: &mut ChaCha8Rng) -> Result<(), String> {
    let p = LightMLParams {
        ratio,
        ..LightMLParams::default()
    };
    let mut store = ParamStore::new();
    init_light_ml(&mut store, "lm", channels, &p, rng);
    let mut g = Graph::inference();
    let a = g.constant(Tensor::uniform(&[2, channels, h, w], -1.0, 1.0, rng));
    let b = g.constant(Tensor::uniform(&[2, channels, h, w], -1.0, 1.0, rng));
    let mut binder = ParamBinder::new(&store, false);
    let (c, r) = light_ml_forward(&mut g, &mut binder, "lm", a, b, &p).map_err(|e| e.to_string())?;
    for (name, v) in [("cls", c), ("reg", r)] {
        if g.shape(v) != g.shape(a) {
            return Err(format!("k={ratio} C={channels}: {name} output {:?}", g.shape(v)));
        }
    }
    Ok(())
}

fn tiny_model(light_ml: bool, ratio: f32) -> ModelConfig {
    ModelConfig {
        widths: vec![4, 8, 8, 8],
        head_channels: 8,
        light_ml,
        light_ml_params: LightMLParams {
            ratio,
            ..LightMLParams::default()
        },
        ..ModelConfig::student()
    }
}

/// Norm of the gradient that a regression-only loss sends into the classification branch
/// and the classification prediction conv.
pub fn cross_branch_gradient(light_ml: bool, ratio: f32, rng: &mut ChaCha8Rng) -> Result<f64, String> {
    let cfg = tiny_model(light_ml, ratio);
    let store = init_params(&cfg, rng).map_err(|e| e.to_string())?;
    let mut g = Graph::new();
    let image = g.constant(Tensor::uniform(&[1, 3, 32, 32], 0.0, 1.0, rng));
    let mut binder = ParamBinder::new(&store, true);
    let levels = forward(&mut g, &mut binder, &cfg, image).map_err(|e| e.to_string())?;
    let mut loss = None;
    for l in &levels {
        let n = g.value(l.reg).numel();
        let w: Vec<f32> = (0..n).map(|_| rng.random_range(-1.0f32..1.0)).collect();
        let term = g.weighted_sum(l.reg, w).map_err(|e| e.to_string())?;
        loss = Some(match loss {
            Some(t) => g.add(t, term).map_err(|e| e.to_string())?,
            None => term,
        });
    }
    g.backward(loss.unwrap()).map_err(|e| e.to_string())?;
    let mut sq = 0.0f64;
    for (name, v) in binder.bindings() {
        if name.starts_with("head.cls") {
            if let Some(grad) = g.grad(*v) {
                sq += grad.data().iter().map(|x| (*x as f64).powi(2)).sum::<f64>();
            }
        }
    }
    Ok(sq.sqrt())
}

/// Positives never carry a valuable-region weight, and CID weights lie in `(1 - gamma, 1]`.
pub fn check_weight_ranges(w: &DistillWeights, cfg: &DistillConfig) -> Result<(), String> {
    for (l, lw) in w.levels.iter().enumerate() {
        for (a, (m, v)) in lw.i_main.iter().zip(&lw.i_vlr).enumerate() {
            if m * v != 0.0 {
                return Err(format!("level {l} anchor {a}: i_main {m} and i_vlr {v} overlap"));
            }
            let cid = matches!(cfg.mode, VlrMode::Cid | VlrMode::CidWithinGt);
            if cid && *v != 0.0 && !(*v > 1.0 - cfg.gamma && *v <= 1.0) {
                return Err(format!("level {l} anchor {a}: i_vlr {v} outside (1 - {}, 1]", cfg.gamma));
            }
            if *v < 0.0 || *v > 1.0 {
                return Err(format!("level {l} anchor {a}: i_vlr {v} outside [0, 1]"));
            }
        }
    }
    Ok(())
}

fn scale_box(b: &BBox, s: f32) -> BBox {
    BBox {
        x1: b.x1 * s,
        y1: b.y1 * s,
        x2: b.x2 * s,
        y2: b.y2 * s,
    }
}

/// The scene with image, boxes and strides multiplied by `s`; teacher logits are in stride
/// units and stay as they are.
pub fn scaled_scene(scene: &VlrScene, s: usize) -> VlrScene {
    let sf = s as f32;
    let levels = &scene.grid.levels;
    let strides: Vec<usize> = levels.iter().map(|l| l.stride * s).collect();
    let side = levels[0].height * levels[0].stride * s;
    let grid = AnchorGrid::new(side, side, &strides).unwrap();
    let gts: Vec<Annotation> = scene
        .gts
        .iter()
        .map(|g| Annotation {
            bbox: scale_box(&g.bbox, sf),
            class: g.class,
        })
        .collect();
    let teacher = DetectionOutput {
        batch: 1,
        levels: scene
            .teacher
            .levels
            .iter()
            .zip(&strides)
            .map(|(l, &st)| LevelOutput { stride: st, ..l.clone() })
            .collect(),
    };
    let teacher_boxes = scene
        .teacher_boxes
        .iter()
        .map(|v| v.iter().map(|b| scale_box(b, sf)).collect())
        .collect();
    let asg = assign_targets(
        &grid,
        &gts,
        &AssignConfig {
            bins: super::oracle::SCENE_BINS,
            scale_factor: 4.0,
            ..AssignConfig::default()
        },
    )
    .unwrap();
    VlrScene {
        grid,
        gts,
        teacher_boxes,
        teacher,
        asg,
    }
}

pub fn weights_of(scene: &VlrScene, cfg: &DistillConfig) -> Result<DistillWeights, String> {
    compute_vlr_weights(&scene.teacher, &scene.grid, &scene.gts, &scene.asg, cfg).map_err(|e| e.to_string())
}

pub fn check_scale_invariance(scene: &VlrScene, cfg: &DistillConfig, s: usize) -> Result<(), String> {
    let base = weights_of(scene, cfg)?;
    let scaled = weights_of(&scaled_scene(scene, s), cfg)?;
    for (l, (a, b)) in base.levels.iter().zip(&scaled.levels).enumerate() {
        if a.i_main != b.i_main || a.i_vlr != b.i_vlr {
            return Err(format!("{:?}: level {l} weights change under x{s} scaling", cfg.mode));
        }
    }
    Ok(())
}

/// Every structural property over `n` random draws each.
pub fn run_suite(n: u64) -> Vec<Outcome> {
    let mut out = Vec::new();
    let mut record = |name: &str, r: Result<(), String>, detail: String| {
        let passed = r.is_ok();
        out.push(Outcome::new(name, passed, r.err().unwrap_or(detail)));
    };

    let shuffle = (1..=32usize).try_for_each(|c| (1..=c).filter(|g| c % g == 0).try_for_each(|g| check_shuffle(c, g)));
    record("channel shuffle is a permutation", shuffle, "C in 1..=32, every divisor".into());

    let shapes = LIGHT_ML_RATIOS.iter().try_for_each(|&k| {
        [1usize, 2, 3, 8, 24].iter().try_for_each(|&c| check_light_ml_shapes(k, c, 3, 5, &mut super::rng(c as u64)))
    });
    record("light-ml preserves shapes", shapes, format!("k in {LIGHT_ML_RATIOS:?}"));

    let mut min_on = f64::INFINITY;
    let mut max_off = 0.0f64;
    let cross = (0..n.min(20)).try_for_each(|seed| {
        for &k in &LIGHT_ML_RATIOS {
            min_on = min_on.min(cross_branch_gradient(true, k, &mut super::rng(seed))?);
        }
        max_off = max_off.max(cross_branch_gradient(false, 0.25, &mut super::rng(seed))?);
        Ok(())
    });
    let cross = cross.and_then(|_| {
        if min_on > 0.0 && max_off == 0.0 {
            Ok(())
        } else {
            Err(format!("with light-ml min norm {min_on:e}, without max norm {max_off:e}"))
        }
    });
    record(
        "cross-branch gradient",
        cross,
        format!("min {min_on:.3e} with light-ml, exactly {max_off} without"),
    );

    for mode in [VlrMode::Cid, VlrMode::CidWithinGt, VlrMode::LdVlr] {
        let r = (0..n).try_for_each(|seed| {
            let mut r = super::rng(seed);
            let scene = random_vlr_scene(&mut r);
            let cfg = vlr_config(mode, &mut r);
            check_weight_ranges(&weights_of(&scene, &cfg)?, &cfg)
        });
        record(&format!("region weights {}", mode.as_str()), r, format!("{n} scenes"));
    }

    for mode in [VlrMode::Cid, VlrMode::CidWithinGt] {
        let r = (0..n).try_for_each(|seed| {
            let mut r = super::rng(seed);
            let scene = random_vlr_scene(&mut r);
            let cfg = vlr_config(mode, &mut r);
            [2usize, 4].iter().try_for_each(|&s| check_scale_invariance(&scene, &cfg, s))
        });
        record(&format!("scale invariance {}", mode.as_str()), r, format!("{n} scenes, x2 and x4"));
    }
    out
}
