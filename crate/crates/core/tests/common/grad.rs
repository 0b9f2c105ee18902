//! Finite-difference checks of every differentiable op and loss.

use cidkd::detector::loss::{expected_offsets, giou_loss};
use cidkd::detector::{assign_targets, detection_loss, AssignConfig, LevelVars};
use cidkd::distill::{
    classification_kd_loss, focal_distill_loss, global_distill_loss, localization_distill_loss, DistillWeights,
    LevelWeights, RECON_PREFIX,
};
use cidkd::geometry::{AnchorGrid, BBox};
use cidkd::lightml::{bias_name, channel_shuffle, light_ml_forward, weight_name, LightMLParams};
use cidkd::synth::Annotation;
use cidkd::tensor::{check_gradients, GradCheckConfig, Graph, ParamBinder, ParamStore, Tensor, Var};
use cidkd::Result;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::Outcome;

pub const TOLERANCE: f64 = 1e-3;

type Build = Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var>>;

pub struct Case {
    pub name: &'static str,
    pub inputs: Box<dyn Fn(&mut ChaCha8Rng) -> Vec<Tensor>>,
    pub build: Build,
}

fn t(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::uniform(shape, -1.0, 1.0, rng)
}

fn pos(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::uniform(shape, 0.3, 2.0, rng)
}

/// Values bounded away from zero with random sign.
fn nonzero(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let m = rng.random_range(0.5f32..1.5);
        if rng.random_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

fn probs(rows: usize, k: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let mut p = Vec::with_capacity(rows * k);
    for _ in 0..rows {
        let e: Vec<f32> = (0..k).map(|_| rng.random_range(-2.0f32..2.0).exp()).collect();
        let z: f32 = e.iter().sum();
        p.extend(e.iter().map(|v| v / z));
    }
    Tensor::new(vec![rows, k], p).unwrap()
}

fn case(
    name: &'static str,
    inputs: impl Fn(&mut ChaCha8Rng) -> Vec<Tensor> + 'static,
    build: impl Fn(&mut Graph, &[Var]) -> Result<Var> + 'static,
) -> Case {
    Case {
        name,
        inputs: Box::new(inputs),
        build: Box::new(build),
    }
}

fn two(shape: &'static [usize]) -> impl Fn(&mut ChaCha8Rng) -> Vec<Tensor> {
    move |r| vec![t(shape, r), t(shape, r)]
}

fn one(shape: &'static [usize]) -> impl Fn(&mut ChaCha8Rng) -> Vec<Tensor> {
    move |r| vec![t(shape, r)]
}

/// Weights for a two-level 4x4 / 2x2 grid with disjoint positive and valuable supports.
fn random_weights(rng: &mut ChaCha8Rng, batch: usize) -> Vec<DistillWeights> {
    (0..batch)
        .map(|_| DistillWeights {
            levels: [(4usize, 8usize), (2, 16)]
                .iter()
                .map(|&(side, stride)| {
                    let n = side * side;
                    let mut i_main = vec![0.0; n];
                    let mut i_vlr = vec![0.0; n];
                    for a in 0..n {
                        match rng.random_range(0..3) {
                            0 => i_main[a] = 1.0,
                            1 => i_vlr[a] = rng.random_range(0.55f32..1.0),
                            _ => {}
                        }
                    }
                    LevelWeights {
                        stride,
                        height: side,
                        width: side,
                        i_main,
                        i_vlr,
                    }
                })
                .collect(),
        })
        .collect()
}

fn detection_fixture() -> (AnchorGrid, Vec<Vec<Annotation>>, Vec<cidkd::detector::AssignmentResult>) {
    let grid = AnchorGrid::new(32, 32, &[8, 16]).unwrap();
    let gts = vec![vec![
        Annotation {
            bbox: BBox::new(5.0, 6.0, 17.0, 15.0).unwrap(),
            class: 1,
        },
        Annotation {
            bbox: BBox::new(18.0, 17.0, 30.0, 31.0).unwrap(),
            class: 0,
        },
    ]];
    let asg = vec![assign_targets(&grid, &gts[0], &AssignConfig { bins: 4, ..AssignConfig::default() }).unwrap()];
    (grid, gts, asg)
}

fn level_vars(cls: &[Var], reg: &[Var]) -> Vec<LevelVars> {
    [(8usize, 4usize), (16, 2)]
        .iter()
        .enumerate()
        .map(|(l, &(stride, side))| LevelVars {
            stride,
            height: side,
            width: side,
            cls_feat: cls[l],
            reg_feat: reg[l],
            cls_map: cls[l],
            reg_map: reg[l],
            cls: cls[l],
            reg: reg[l],
        })
        .collect()
}

fn recon_store(ch: usize) -> ParamStore {
    let mut s = ParamStore::new();
    for i in 0..2 {
        s.insert(format!("{RECON_PREFIX}.conv{i}.weight"), Tensor::zeros(&[ch, ch, 3, 3]));
        s.insert(format!("{RECON_PREFIX}.conv{i}.bias"), Tensor::zeros(&[ch]));
    }
    s
}

fn bind_recon(binder: &mut ParamBinder, v: &[Var]) {
    for i in 0..2 {
        binder.bind(format!("{RECON_PREFIX}.conv{i}.weight"), v[2 * i]);
        binder.bind(format!("{RECON_PREFIX}.conv{i}.bias"), v[2 * i + 1]);
    }
}

fn light_ml_case(name: &'static str, ratio: f32) -> Case {
    let p = LightMLParams {
        ratio,
        ..LightMLParams::default()
    };
    let kc = p.conv_channels(8);
    case(
        name,
        move |r| {
            let mut v = vec![t(&[1, 8, 3, 3], r), t(&[1, 8, 3, 3], r)];
            if kc > 0 {
                v.push(Tensor::uniform(&[2 * kc, 2 * kc, 3, 3], -0.3, 0.3, r));
                v.push(t(&[2 * kc], r));
            }
            v
        },
        move |g, v| {
            let store = ParamStore::new();
            let mut b = ParamBinder::new(&store, true);
            if v.len() == 4 {
                b.bind(weight_name("lm"), v[2]);
                b.bind(bias_name("lm"), v[3]);
            }
            let (c, r) = light_ml_forward(g, &mut b, "lm", v[0], v[1], &p)?;
            // uneven weights so both outputs matter
            let r2 = g.mul_scalar(r, 0.7);
            let both = g.concat(&[c, r2], 1)?;
            Ok(both)
        },
    )
}

pub fn cases() -> Vec<Case> {
    let mut v = vec![
        case("add", two(&[2, 3]), |g, v| g.add(v[0], v[1])),
        case("sub", two(&[2, 3]), |g, v| g.sub(v[0], v[1])),
        case("mul", two(&[2, 3]), |g, v| g.mul(v[0], v[1])),
        case("div", |r| vec![t(&[2, 3], r), nonzero(&[2, 3], r)], |g, v| g.div(v[0], v[1])),
        case("minimum", two(&[2, 3]), |g, v| g.minimum(v[0], v[1])),
        case("maximum", two(&[2, 3]), |g, v| g.maximum(v[0], v[1])),
        case("add_scalar", one(&[5]), |g, v| Ok(g.add_scalar(v[0], 0.7))),
        case("mul_scalar", one(&[5]), |g, v| Ok(g.mul_scalar(v[0], -1.3))),
        case("neg", one(&[5]), |g, v| Ok(g.neg(v[0]))),
        case("relu", one(&[6]), |g, v| Ok(g.relu(v[0]))),
        case("sigmoid", |r| vec![Tensor::uniform(&[6], -3.0, 3.0, r)], |g, v| Ok(g.sigmoid(v[0]))),
        case("exp", one(&[6]), |g, v| Ok(g.exp(v[0]))),
        case("log", |r| vec![pos(&[6], r)], |g, v| Ok(g.log(v[0]))),
        case("sqrt", |r| vec![pos(&[6], r)], |g, v| Ok(g.sqrt(v[0]))),
        case("smooth_l1", |r| vec![Tensor::uniform(&[8], -3.0, 3.0, r)], |g, v| Ok(g.smooth_l1(v[0]))),
        case("broadcast_to", one(&[1, 3]), |g, v| g.broadcast_to(v[0], &[4, 3])),
        case("broadcast_to_inner", one(&[2, 1, 3]), |g, v| g.broadcast_to(v[0], &[2, 4, 3])),
        case("sum", one(&[3, 4]), |g, v| Ok(g.sum(v[0]))),
        case("mean", one(&[3, 4]), |g, v| Ok(g.mean(v[0]))),
        case("weighted_sum", one(&[4]), |g, v| g.weighted_sum(v[0], vec![0.5, -1.0, 2.0, 0.25])),
        case("reshape", one(&[2, 6]), |g, v| g.reshape(v[0], &[3, 4])),
        case(
            "concat",
            |r| vec![t(&[2, 2, 3], r), t(&[2, 1, 3], r)],
            |g, v| g.concat(&[v[0], v[1]], 1),
        ),
        case("slice", one(&[2, 5, 2]), |g, v| g.slice(v[0], 1, 1, 3)),
        case("split", one(&[2, 5]), |g, v| {
            let parts = g.split(v[0], 1, &[2, 3])?;
            let a = g.mul_scalar(parts[0], 2.0);
            let a = g.sum(a);
            let b = g.exp(parts[1]);
            let b = g.sum(b);
            g.add(a, b)
        }),
        case("permute_channels", one(&[1, 4, 2, 2]), |g, v| g.permute_channels(v[0], vec![2, 0, 3, 1])),
        case(
            "conv2d_s1_p1",
            |r| vec![t(&[2, 3, 5, 5], r), t(&[4, 3, 3, 3], r)],
            |g, v| g.conv2d(v[0], v[1], 1, 1),
        ),
        case(
            "conv2d_s2_p0",
            |r| vec![t(&[1, 2, 6, 6], r), t(&[3, 2, 3, 3], r)],
            |g, v| g.conv2d(v[0], v[1], 2, 0),
        ),
        case(
            "conv2d_s2_p1",
            |r| vec![t(&[1, 2, 5, 5], r), t(&[3, 2, 3, 3], r)],
            |g, v| g.conv2d(v[0], v[1], 2, 1),
        ),
        case(
            "conv2d_1x1",
            |r| vec![t(&[2, 3, 3, 3], r), t(&[2, 3, 1, 1], r)],
            |g, v| g.conv2d(v[0], v[1], 1, 0),
        ),
        case(
            "add_channel_bias",
            |r| vec![t(&[2, 3, 2, 2], r), t(&[3], r)],
            |g, v| g.add_channel_bias(v[0], v[1]),
        ),
        case("max_pool2d", one(&[1, 2, 4, 4]), |g, v| g.max_pool2d(v[0], 2, 2)),
        case("avg_pool2d", one(&[1, 2, 4, 4]), |g, v| g.avg_pool2d(v[0], 2, 2)),
        case("upsample_nearest", one(&[1, 2, 2, 3]), |g, v| g.upsample_nearest(v[0], 2)),
        case("matmul", |r| vec![t(&[3, 4], r), t(&[4, 2], r)], |g, v| g.matmul(v[0], v[1])),
        case(
            "linear",
            |r| vec![t(&[3, 4], r), t(&[4, 2], r), t(&[2], r)],
            |g, v| g.linear(v[0], v[1], v[2]),
        ),
        case("nchw_to_rows", one(&[2, 3, 2, 2]), |g, v| g.nchw_to_rows(v[0])),
        case("softmax", |r| vec![Tensor::uniform(&[3, 4], -2.0, 2.0, r)], |g, v| g.softmax(v[0])),
        case("log_softmax", |r| vec![Tensor::uniform(&[3, 4], -2.0, 2.0, r)], |g, v| g.log_softmax(v[0])),
        case("gather_rows", one(&[4, 3]), |g, v| g.gather_rows(v[0], &[2, 0, 2])),
        case("channel_shuffle", one(&[1, 6, 2, 2]), |g, v| channel_shuffle(g, v[0], 2)),
    ];
    for (name, tau, sub) in [
        ("softmax_cross_entropy", 1.0f32, false),
        ("softmax_kl_tau2", 2.0, true),
        ("softmax_kl_tau10", 10.0, true),
    ] {
        v.push(case(
            name,
            |r| vec![Tensor::uniform(&[3, 5], -2.0, 2.0, r)],
            move |g, v| {
                let target = probs(3, 5, &mut super::rng(99));
                g.softmax_cross_entropy(v[0], &target, &[1.0, 0.5, 2.0], tau, sub)
            },
        ));
    }
    v.push(case(
        "quality_focal",
        |r| vec![Tensor::uniform(&[3, 4], -3.0, 3.0, r)],
        |g, v| {
            let target = Tensor::from_fn(&[3, 4], |i| [0.0, 0.8, 0.0, 0.3][i % 4]);
            g.quality_focal(v[0], &target, 2.0)
        },
    ));
    for (name, k) in [("light_ml_k0", 0.0), ("light_ml_k0.25", 0.25), ("light_ml_k0.5", 0.5), ("light_ml_k1", 1.0)] {
        v.push(light_ml_case(name, k));
    }
    v.push(case(
        "expected_offsets",
        |r| vec![t(&[3, 16], r)],
        |g, v| expected_offsets(g, v[0], 4),
    ));
    v.push(case(
        "giou_loss",
        |r| vec![Tensor::uniform(&[3, 4], 0.5, 3.0, r)],
        |g, v| {
            let target = Tensor::new(vec![3, 4], vec![1.0, 2.0, 1.5, 0.5, 2.0, 2.0, 2.0, 2.0, 0.2, 3.0, 1.0, 1.0]).unwrap();
            giou_loss(g, v[0], &target)
        },
    ));
    v.push(case(
        "detection_loss_box_terms",
        |r| vec![t(&[16, 16], r), t(&[4, 16], r)],
        |g, v| {
            let (grid, gts, asg) = detection_fixture();
            let c0 = g.constant(Tensor::zeros(&[16, 2]));
            let c1 = g.constant(Tensor::zeros(&[4, 2]));
            let lv = level_vars(&[c0, c1], &[v[0], v[1]]);
            let l = detection_loss(g, &lv, &grid.levels, &gts, &asg, 4)?;
            let scaled = g.mul_scalar(l.dfl, 0.25);
            let twice = g.mul_scalar(l.reg, 2.0);
            g.add(twice, scaled)
        },
    ));
    v.push(case(
        "detection_loss_cls",
        |r| vec![Tensor::uniform(&[16, 2], -3.0, 1.0, r), Tensor::uniform(&[4, 2], -3.0, 1.0, r)],
        |g, v| {
            let (grid, gts, asg) = detection_fixture();
            let r0 = g.constant(Tensor::from_fn(&[16, 16], |i| (i % 5) as f32 * 0.3));
            let r1 = g.constant(Tensor::from_fn(&[4, 16], |i| (i % 3) as f32 * 0.2));
            let lv = level_vars(&[v[0], v[1]], &[r0, r1]);
            Ok(detection_loss(g, &lv, &grid.levels, &gts, &asg, 4)?.cls)
        },
    ));
    v.push(case(
        "focal_distill_loss",
        |r| vec![t(&[32, 16], r), t(&[8, 16], r)],
        |g, v| {
            let mut r = super::rng(7);
            let teacher = vec![Tensor::uniform(&[32, 16], -2.0, 2.0, &mut r), Tensor::uniform(&[8, 16], -2.0, 2.0, &mut r)];
            let w = random_weights(&mut r, 2);
            let f = focal_distill_loss(g, &teacher, &[v[0], v[1]], &w, 1.0, 2.0, 4)?;
            Ok(g.mul_scalar(f, 10.0))
        },
    ));
    v.push(case(
        "classification_kd_loss",
        |r| vec![t(&[16, 3], r), t(&[4, 3], r)],
        |g, v| {
            let mut r = super::rng(8);
            let teacher = vec![Tensor::uniform(&[16, 3], -2.0, 2.0, &mut r), Tensor::uniform(&[4, 3], -2.0, 2.0, &mut r)];
            let w = random_weights(&mut r, 1);
            let f = classification_kd_loss(g, &teacher, &[v[0], v[1]], &w, 2.0, true, 1.0)?;
            Ok(g.mul_scalar(f, 10.0))
        },
    ));
    v.push(case(
        "global_distill_loss",
        |r| {
            vec![
                Tensor::uniform(&[4, 4, 3, 3], -0.4, 0.4, r),
                t(&[4], r),
                Tensor::uniform(&[4, 4, 3, 3], -0.4, 0.4, r),
                t(&[4], r),
                t(&[1, 4, 4, 4], r),
                t(&[1, 4, 2, 2], r),
            ]
        },
        |g, v| {
            let mut r = super::rng(9);
            let teacher = vec![t(&[1, 4, 4, 4], &mut r), t(&[1, 4, 2, 2], &mut r)];
            let masks = vec![
                cidkd::distill::sample_keep_mask(&[1, 4, 4, 4], 0.5, &mut r)?,
                Tensor::ones(&[1, 1, 2, 2]),
            ];
            let store = recon_store(4);
            let mut b = ParamBinder::new(&store, true);
            bind_recon(&mut b, v);
            let l = global_distill_loss(g, &mut b, &teacher, &[v[4], v[5]], &masks)?;
            Ok(g.mul_scalar(l, 10.0))
        },
    ));
    v.push(case(
        "localization_distill_loss",
        |r| vec![t(&[16, 8], r), t(&[1, 8, 4, 4], r)],
        |g, v| {
            let mut r = super::rng(10);
            let teacher_rows = vec![Tensor::uniform(&[16, 8], -2.0, 2.0, &mut r)];
            let teacher_map = vec![t(&[1, 8, 4, 4], &mut r)];
            let mut w = random_weights(&mut r, 1);
            w[0].levels.truncate(1);
            let f = focal_distill_loss(g, &teacher_rows, &[v[0]], &w, 1.0, 1.0, 2)?;
            let mut store = recon_store(8);
            for i in 0..2 {
                store.insert(
                    format!("{RECON_PREFIX}.conv{i}.weight"),
                    Tensor::uniform(&[8, 8, 3, 3], -0.2, 0.2, &mut r),
                );
            }
            let mut b = ParamBinder::new(&store, false);
            let glob = global_distill_loss(g, &mut b, &teacher_map, &[v[1]], &[Tensor::ones(&[1, 1, 4, 4])])?;
            localization_distill_loss(g, f, glob, 4.0)
        },
    ));
    v
}

/// Runs every case for `seeds` input draws; one outcome per case.
pub fn run_suite(seeds: u64) -> Vec<Outcome> {
    cases()
        .iter()
        .map(|c| {
            let mut worst = 0.0f64;
            let mut error = None;
            for seed in 0..seeds {
                let mut r = super::rng(1000 + seed);
                let inputs = (c.inputs)(&mut r);
                let cfg = GradCheckConfig {
                    seed,
                    ..GradCheckConfig::default()
                };
                match check_gradients(c.name, &inputs, |g, v| (c.build)(g, v), &cfg) {
                    Ok(rep) => worst = worst.max(rep.max_rel_err),
                    Err(e) => {
                        error = Some(e.to_string());
                        break;
                    }
                }
            }
            match error {
                Some(e) => Outcome::new(c.name, false, e),
                None => Outcome::new(c.name, worst < TOLERANCE, format!("max rel err {worst:.2e} over {seeds} seeds")),
            }
        })
        .collect()
}
