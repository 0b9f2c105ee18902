//! Exact-arithmetic reference implementations and the case generators that drive them.

use cidkd::detector::{assign_targets, AssignConfig, AssignmentResult, Detection, DetectionOutput, LevelOutput};
use cidkd::distill::{compute_vlr_weights, DistillConfig, DistillWeights, LevelWeights, VlrMode};
use cidkd::eval::evaluate_with_thresholds;
use cidkd::geometry::{centerness, offsets, overlap_metrics, AnchorGrid, BBox};
use cidkd::synth::Annotation;
use cidkd::tensor::Tensor;
use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{One, Signed, ToPrimitive, Zero};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::Outcome;

pub type Q = BigRational;

pub fn q(x: f32) -> Q {
    Q::from_float(x).expect("finite")
}

fn qi(n: i64) -> Q {
    Q::from_integer(BigInt::from(n))
}

fn qmin(a: &Q, b: &Q) -> Q {
    if a <= b {
        a.clone()
    } else {
        b.clone()
    }
}

fn qmax(a: &Q, b: &Q) -> Q {
    if a >= b {
        a.clone()
    } else {
        b.clone()
    }
}

/// Whether `v` is a nearest f32 to `x` (either neighbour on an exact tie).
pub fn is_nearest_f32(v: f32, x: &Q) -> bool {
    let two = qi(2);
    let lo = (q(v) + q(v.next_down())) / &two;
    let hi = (q(v) + q(v.next_up())) / &two;
    &lo <= x && x <= &hi
}

pub fn round_f32(x: &Q) -> f32 {
    let mut v = x.to_f64().expect("representable") as f32;
    while !is_nearest_f32(v, x) {
        v = if &q(v) < x { v.next_up() } else { v.next_down() };
    }
    v
}

/// Nearest f32 to `sqrt(x)`, found by squaring the rounding brackets.
pub fn round_sqrt_f32(x: &Q) -> f32 {
    if x.is_zero() {
        return 0.0;
    }
    let two = qi(2);
    let mut v = (x.to_f64().expect("representable").sqrt()) as f32;
    loop {
        let lo = (q(v) + q(v.next_down())) / &two;
        let hi = (q(v) + q(v.next_up())) / &two;
        let lo2 = if lo.is_negative() { Q::zero() } else { &lo * &lo };
        if &lo2 > x {
            v = v.next_down();
        } else if &(&hi * &hi) < x {
            v = v.next_up();
        } else {
            return v;
        }
    }
}

pub struct ExactBox {
    pub x1: Q,
    pub y1: Q,
    pub x2: Q,
    pub y2: Q,
}

impl ExactBox {
    pub fn of(b: &BBox) -> Self {
        ExactBox {
            x1: q(b.x1),
            y1: q(b.y1),
            x2: q(b.x2),
            y2: q(b.y2),
        }
    }

    fn area(&self) -> Q {
        (&self.x2 - &self.x1) * (&self.y2 - &self.y1)
    }

    fn contains(&self, x: &Q, y: &Q) -> bool {
        &self.x1 <= x && x <= &self.x2 && &self.y1 <= y && y <= &self.y2
    }

    fn same(&self, o: &ExactBox) -> bool {
        self.x1 == o.x1 && self.y1 == o.y1 && self.x2 == o.x2 && self.y2 == o.y2
    }
}

pub struct ExactOverlap {
    pub iou: Q,
    pub giou: Q,
    pub diou: Q,
}

/// Overlap metrics straight from their definitions, in rationals.
pub fn exact_overlap(a: &ExactBox, b: &ExactBox) -> ExactOverlap {
    if a.same(b) {
        return ExactOverlap {
            iou: Q::one(),
            giou: Q::one(),
            diou: Q::one(),
        };
    }
    let zero = Q::zero();
    let iw = qmax(&(qmin(&a.x2, &b.x2) - qmax(&a.x1, &b.x1)), &zero);
    let ih = qmax(&(qmin(&a.y2, &b.y2) - qmax(&a.y1, &b.y1)), &zero);
    let inter = iw * ih;
    let union = a.area() + b.area() - &inter;
    if union <= zero {
        return ExactOverlap {
            iou: zero.clone(),
            giou: zero.clone(),
            diou: zero,
        };
    }
    let iou = &inter / &union;
    let cw = qmax(&a.x2, &b.x2) - qmin(&a.x1, &b.x1);
    let ch = qmax(&a.y2, &b.y2) - qmin(&a.y1, &b.y1);
    let c_area = &cw * &ch;
    let giou = if c_area > zero {
        &iou - (&c_area - &union) / &c_area
    } else {
        iou.clone()
    };
    let two = qi(2);
    let dx = (&a.x1 + &a.x2) / &two - (&b.x1 + &b.x2) / &two;
    let dy = (&a.y1 + &a.y2) / &two - (&b.y1 + &b.y2) / &two;
    let diag2 = &cw * &cw + &ch * &ch;
    let diou = if diag2 > zero {
        &iou - (&dx * &dx + &dy * &dy) / diag2
    } else {
        iou.clone()
    };
    ExactOverlap { iou, giou, diou }
}

/// Exact centerness radicand of a point inside a box.
pub fn exact_centerness_sq(px: &Q, py: &Q, b: &ExactBox) -> Q {
    let (l, r) = (px - &b.x1, &b.x2 - px);
    let (t, bo) = (py - &b.y1, &b.y2 - py);
    let den = qmax(&l, &r) * qmax(&t, &bo);
    if den.is_zero() {
        return Q::zero();
    }
    qmin(&l, &r) * qmin(&t, &bo) / den
}

/// Random box with half-pixel corners in `[0, side]`; sometimes degenerate.
pub fn grid_box(rng: &mut ChaCha8Rng, side: u32) -> BBox {
    let coord = |rng: &mut ChaCha8Rng| -> (f32, f32) {
        let a = rng.random_range(0..=2 * side) as f32 / 2.0;
        let b = if rng.random_bool(0.05) {
            a
        } else {
            rng.random_range(0..=2 * side) as f32 / 2.0
        };
        (a.min(b), a.max(b))
    };
    let (x1, x2) = coord(rng);
    let (y1, y2) = coord(rng);
    BBox { x1, y1, x2, y2 }
}

pub fn check_overlap(a: &BBox, b: &BBox) -> Result<(), String> {
    let got = overlap_metrics(a, b);
    let want = exact_overlap(&ExactBox::of(a), &ExactBox::of(b));
    for (name, g, w) in [("iou", got.iou, &want.iou), ("giou", got.giou, &want.giou), ("diou", got.diou, &want.diou)] {
        if !is_nearest_f32(g, w) {
            return Err(format!("{name} of {a:?} and {b:?}: got {g}, exact {w}"));
        }
    }
    Ok(())
}

pub fn check_centerness(p: (f32, f32), b: &BBox) -> Result<(), String> {
    let o = offsets(p, b);
    let eb = ExactBox::of(b);
    let inside = eb.contains(&q(p.0), &q(p.1));
    if o.inside != inside {
        return Err(format!("inside flag of {p:?} in {b:?}: got {}", o.inside));
    }
    if !inside {
        return match centerness(&o) {
            Err(_) => Ok(()),
            Ok(c) => Err(format!("centerness {c} accepted for {p:?} outside {b:?}")),
        };
    }
    let got = centerness(&o).map_err(|e| e.to_string())?;
    let want = round_sqrt_f32(&exact_centerness_sq(&q(p.0), &q(p.1), &eb));
    if got != want {
        return Err(format!("centerness of {p:?} in {b:?}: got {got}, nearest {want}"));
    }
    Ok(())
}

/// A scene on a small anchor grid with teacher boxes that decode exactly.
pub struct VlrScene {
    pub grid: AnchorGrid,
    pub gts: Vec<Annotation>,
    pub teacher_boxes: Vec<Vec<BBox>>,
    pub teacher: DetectionOutput,
    pub asg: AssignmentResult,
}

pub const SCENE_BINS: usize = 8;

/// Logits whose expected bin is exactly `half_bins / 2`.
fn side_logits(half_bins: usize) -> Vec<f32> {
    let mut v = vec![-1000.0f32; SCENE_BINS];
    v[half_bins / 2] = 0.0;
    if half_bins % 2 == 1 {
        v[half_bins / 2 + 1] = 0.0;
    }
    v
}

pub fn random_vlr_scene(rng: &mut ChaCha8Rng) -> VlrScene {
    let side = 48usize;
    let strides = [2usize, 4];
    let grid = AnchorGrid::new(side, side, &strides).unwrap();
    let n_gt = rng.random_range(0..=4);
    let gts: Vec<Annotation> = (0..n_gt)
        .map(|_| {
            let w = rng.random_range(2..=24) as f32;
            let h = rng.random_range(2..=24) as f32;
            let x1 = rng.random_range(0..=(2 * (side as u32 - w as u32))) as f32 / 2.0;
            let y1 = rng.random_range(0..=(2 * (side as u32 - h as u32))) as f32 / 2.0;
            Annotation {
                bbox: BBox::new(x1, y1, x1 + w, y1 + h).unwrap(),
                class: 0,
            }
        })
        .collect();
    let mut teacher_boxes = Vec::new();
    let mut levels = Vec::new();
    let max_half = 2 * (SCENE_BINS - 1);
    for level in &grid.levels {
        let n = level.len();
        let s = level.stride as f32;
        let mut reg = Vec::with_capacity(n * 4 * SCENE_BINS);
        let mut boxes = Vec::with_capacity(n);
        for a in 0..n {
            let (x, y) = level.point(a);
            let h: [usize; 4] = std::array::from_fn(|_| rng.random_range(0..=max_half));
            for side in h {
                reg.extend(side_logits(side));
            }
            let d = |k: usize| h[k] as f32 / 2.0 * s;
            boxes.push(BBox {
                x1: x - d(0),
                y1: y - d(1),
                x2: x + d(2),
                y2: y + d(3),
            });
        }
        teacher_boxes.push(boxes);
        levels.push(LevelOutput {
            stride: level.stride,
            height: level.height,
            width: level.width,
            cls: Tensor::zeros(&[n, 1]),
            reg: Tensor::new(vec![n, 4 * SCENE_BINS], reg).unwrap(),
            reg_map: Tensor::zeros(&[1, 4 * SCENE_BINS, level.height, level.width]),
        });
    }
    let asg = assign_targets(
        &grid,
        &gts,
        &AssignConfig {
            bins: SCENE_BINS,
            scale_factor: 4.0,
            ..AssignConfig::default()
        },
    )
    .unwrap();
    VlrScene {
        grid,
        gts,
        teacher_boxes,
        teacher: DetectionOutput { batch: 1, levels },
        asg,
    }
}

fn centerness_weight(c2: &Q, gamma: f32) -> f32 {
    let c = round_sqrt_f32(c2);
    if c < gamma {
        1.0 - c
    } else {
        0.0
    }
}

/// Exhaustive reference for every anchor of `scene` under `cfg`.
pub fn brute_force_vlr(scene: &VlrScene, cfg: &DistillConfig) -> DistillWeights {
    let gts: Vec<ExactBox> = scene.gts.iter().map(|g| ExactBox::of(&g.bbox)).collect();
    let two = qi(2);
    let levels = scene
        .grid
        .levels
        .iter()
        .enumerate()
        .map(|(l, level)| {
            let la = &scene.asg.levels[l];
            let i_vlr = (0..level.len())
                .map(|a| {
                    if la.gt[a].is_some() || gts.is_empty() {
                        return 0.0;
                    }
                    let (x, y) = level.point(a);
                    let (px, py) = (q(x), q(y));
                    match cfg.mode {
                        VlrMode::Cid => {
                            let tb = ExactBox::of(&scene.teacher_boxes[l][a]);
                            if !tb.contains(&px, &py) {
                                return 0.0;
                            }
                            let mut nearest: Option<(Q, usize)> = None;
                            for (g, b) in gts.iter().enumerate() {
                                let dx = &px - (&b.x1 + &b.x2) / &two;
                                let dy = &py - (&b.y1 + &b.y2) / &two;
                                let d2 = &dx * &dx + &dy * &dy;
                                if nearest.as_ref().is_none_or(|(bd, _)| &d2 < bd) {
                                    nearest = Some((d2, g));
                                }
                            }
                            let (d2, g) = nearest.unwrap();
                            let (w, h) = (&gts[g].x2 - &gts[g].x1, &gts[g].y2 - &gts[g].y1);
                            let s = q(cfg.filter_scale);
                            if d2 > &s * &s * (&w * &w + &h * &h) {
                                return 0.0;
                            }
                            centerness_weight(&exact_centerness_sq(&px, &py, &tb), cfg.gamma)
                        }
                        VlrMode::CidWithinGt => {
                            let mut smallest: Option<(Q, usize)> = None;
                            for (g, b) in gts.iter().enumerate() {
                                if b.contains(&px, &py) && smallest.as_ref().is_none_or(|(ba, _)| &b.area() < ba) {
                                    smallest = Some((b.area(), g));
                                }
                            }
                            match smallest {
                                Some((_, g)) => centerness_weight(&exact_centerness_sq(&px, &py, &gts[g]), cfg.gamma),
                                None => 0.0,
                            }
                        }
                        VlrMode::LdVlr => {
                            let half = q(cfg.anchor_box_scale) * qi(level.stride as i64) / &two;
                            let ab = ExactBox {
                                x1: &px - &half,
                                y1: &py - &half,
                                x2: &px + &half,
                                y2: &py + &half,
                            };
                            let mut best: Option<ExactOverlap> = None;
                            for b in &gts {
                                let o = exact_overlap(&ab, b);
                                if best.as_ref().is_none_or(|bo| o.iou > bo.iou) {
                                    best = Some(o);
                                }
                            }
                            let o = best.unwrap();
                            let iou = round_f32(&o.iou);
                            if iou > 0.0 && round_f32(&o.diou) < cfg.gamma_ld * cfg.alpha_pos {
                                cfg.lambda_vlr * iou
                            } else {
                                0.0
                            }
                        }
                    }
                })
                .collect();
            LevelWeights {
                stride: level.stride,
                height: level.height,
                width: level.width,
                i_main: la.i_main.clone(),
                i_vlr,
            }
        })
        .collect();
    DistillWeights { levels }
}

pub fn check_vlr(scene: &VlrScene, cfg: &DistillConfig) -> Result<(), String> {
    let got = compute_vlr_weights(&scene.teacher, &scene.grid, &scene.gts, &scene.asg, cfg).map_err(|e| e.to_string())?;
    let want = brute_force_vlr(scene, cfg);
    for (l, (g, w)) in got.levels.iter().zip(&want.levels).enumerate() {
        if g.i_main != w.i_main {
            return Err(format!("{:?} level {l}: i_main differs", cfg.mode));
        }
        for (a, (x, y)) in g.i_vlr.iter().zip(&w.i_vlr).enumerate() {
            if x.to_bits() != y.to_bits() {
                return Err(format!("{:?} level {l} anchor {a}: got {x}, reference {y}", cfg.mode));
            }
        }
    }
    if got.levels.len() != want.levels.len() {
        return Err("level count differs".into());
    }
    Ok(())
}

pub fn vlr_config(mode: VlrMode, rng: &mut ChaCha8Rng) -> DistillConfig {
    DistillConfig {
        mode,
        gamma: [0.25f32, 0.45, 0.6, 0.8][rng.random_range(0..4)],
        gamma_ld: [0.2f32, 0.4, 0.6, 1.0][rng.random_range(0..4)],
        anchor_box_scale: [2.0f32, 4.0, 8.0][rng.random_range(0..3)],
        ..DistillConfig::default()
    }
}

/// A tiny evaluation problem: at most five detections over one or two images.
pub struct ApCase {
    pub dets: Vec<Vec<Detection>>,
    pub gts: Vec<Vec<Annotation>>,
    pub classes: usize,
}

pub fn random_ap_case(rng: &mut ChaCha8Rng) -> ApCase {
    let images = rng.random_range(1..=2);
    let classes = rng.random_range(1..=2);
    let mut gts = Vec::new();
    for _ in 0..images {
        let n = rng.random_range(0..=3);
        gts.push(
            (0..n)
                .map(|_| Annotation {
                    bbox: grid_box_sized(rng),
                    class: rng.random_range(0..classes),
                })
                .collect::<Vec<_>>(),
        );
    }
    let total = rng.random_range(0..=5);
    // distinct scores so the ranking is unambiguous
    let mut scores: Vec<f32> = (1..=total).map(|i| i as f32 / 8.0).collect();
    for i in (1..scores.len()).rev() {
        scores.swap(i, rng.random_range(0..=i));
    }
    let mut dets = vec![Vec::new(); images];
    for score in scores {
        let img = rng.random_range(0..images);
        let (bbox, class) = match gts[img].get(rng.random_range(0..=gts[img].len())) {
            // a jittered copy of a GT produces IoUs across the threshold range
            Some(g) if rng.random_bool(0.8) => {
                let j = |rng: &mut ChaCha8Rng| rng.random_range(-2..=2) as f32 / 2.0;
                let b = g.bbox;
                let (x1, y1) = (b.x1 + j(rng), b.y1 + j(rng));
                let bbox = BBox::new(x1, y1, (b.x2 + j(rng)).max(x1 + 0.5), (b.y2 + j(rng)).max(y1 + 0.5)).unwrap();
                let class = if rng.random_bool(0.85) { g.class } else { rng.random_range(0..classes) };
                (bbox, class)
            }
            _ => (grid_box_sized(rng), rng.random_range(0..classes)),
        };
        dets[img].push(Detection { bbox, class, score });
    }
    ApCase { dets, gts, classes }
}

fn grid_box_sized(rng: &mut ChaCha8Rng) -> BBox {
    let w = rng.random_range(4..=16) as f32;
    let h = rng.random_range(4..=16) as f32;
    let x1 = rng.random_range(0..=32) as f32;
    let y1 = rng.random_range(0..=32) as f32;
    BBox::new(x1, y1, x1 + w, y1 + h).unwrap()
}

/// AP of one class at one IoU threshold as the mean over 101 recall levels of the best
/// precision at that recall or beyond, evaluated over every ranking prefix.
fn definitional_ap(case: &ApCase, class: usize, t: f32) -> Option<f64> {
    let npig: usize = case.gts.iter().map(|g| g.iter().filter(|a| a.class == class).count()).sum();
    if npig == 0 {
        return None;
    }
    // greedy matching per image in score order; among eligible GTs the highest IoU wins,
    // the later GT on exact ties
    let mut ranked: Vec<(f32, bool)> = Vec::new();
    for (img, dets) in case.dets.iter().enumerate() {
        let gts: Vec<&Annotation> = case.gts[img].iter().filter(|a| a.class == class).collect();
        let mut taken = vec![false; gts.len()];
        let mut mine: Vec<&Detection> = dets.iter().filter(|d| d.class == class).collect();
        mine.sort_by(|a, b| b.score.total_cmp(&a.score));
        for d in mine {
            let db = ExactBox::of(&d.bbox);
            let mut best: Option<(Q, usize)> = None;
            for (g, gt) in gts.iter().enumerate() {
                if taken[g] {
                    continue;
                }
                let iou = exact_overlap(&db, &ExactBox::of(&gt.bbox)).iou;
                if round_f32(&iou) < t {
                    continue;
                }
                if best.as_ref().is_none_or(|(bi, _)| &iou >= bi) {
                    best = Some((iou, g));
                }
            }
            if let Some((_, g)) = best {
                taken[g] = true;
            }
            ranked.push((d.score, best.is_some()));
        }
    }
    ranked.sort_by(|a, b| b.0.total_cmp(&a.0));
    let prefixes: Vec<(usize, usize)> = (1..=ranked.len())
        .map(|k| (ranked[..k].iter().filter(|r| r.1).count(), k))
        .collect();
    let mut sum = 0.0;
    for level in 0..=100usize {
        // recall tp / npig >= level / 100, compared in integers
        let best = prefixes
            .iter()
            .filter(|(tp, _)| tp * 100 >= level * npig)
            .map(|(tp, k)| *tp as f64 / *k as f64)
            .fold(0.0, f64::max);
        sum += best;
    }
    Some(sum / 101.0)
}

pub fn check_ap(case: &ApCase) -> Result<(), String> {
    for thresholds in [vec![0.5f32], vec![0.75], (0..10).map(|i| 0.5 + 0.05 * i as f32).collect::<Vec<_>>()] {
        let got = evaluate_with_thresholds(&case.dets, &case.gts, case.classes, &thresholds);
        let mut vals = Vec::new();
        for c in 0..case.classes {
            for &t in &thresholds {
                if let Some(ap) = definitional_ap(case, c, t) {
                    vals.push(ap);
                }
            }
        }
        let want = if vals.is_empty() { 0.0 } else { vals.iter().sum::<f64>() / vals.len() as f64 };
        if (got.map - want).abs() > 1e-6 {
            return Err(format!("thresholds {thresholds:?}: got {}, reference {want}", got.map));
        }
    }
    Ok(())
}

/// Every oracle over `n` random cases each.
pub fn run_suite(n: u64) -> Vec<Outcome> {
    let mut out = Vec::new();
    let mut first = |name: &str, f: &mut dyn FnMut(&mut ChaCha8Rng) -> Result<(), String>| {
        let mut err = None;
        for seed in 0..n {
            if let Err(e) = f(&mut super::rng(seed)) {
                err = Some(format!("seed {seed}: {e}"));
                break;
            }
        }
        let passed = err.is_none();
        out.push(Outcome::new(name, passed, err.unwrap_or_else(|| format!("{n} cases"))));
    };
    first("overlap_metrics", &mut |r| {
        (0..20).try_for_each(|_| {
            let (a, b) = (grid_box(r, 24), grid_box(r, 24));
            check_overlap(&a, &b)
        })
    });
    first("centerness", &mut |r| {
        (0..20).try_for_each(|_| {
            let b = grid_box(r, 24);
            let p = (r.random_range(0..=96) as f32 / 4.0, r.random_range(0..=96) as f32 / 4.0);
            check_centerness(p, &b)
        })
    });
    for mode in [VlrMode::Cid, VlrMode::CidWithinGt, VlrMode::LdVlr] {
        let name = format!("compute_vlr_weights {}", mode.as_str());
        first(&name, &mut |r| {
            let scene = random_vlr_scene(r);
            let cfg = vlr_config(mode, r);
            check_vlr(&scene, &cfg)
        });
    }
    first("evaluate", &mut |r| check_ap(&random_ap_case(r)));
    out
}
