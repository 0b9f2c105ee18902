//! Quality focal classification loss, GIoU box loss and distribution focal loss.

use super::{AssignmentResult, LevelVars};
use crate::error::{Error, Result};
use crate::geometry::{decode_distribution, overlap_metrics, AnchorLevel, BBox};
use crate::synth::Annotation;
use crate::tensor::{Graph, Tensor, Var};

pub const QFL_BETA: f32 = 2.0;
const EPS: f32 = 1e-6;

#[derive(Clone, Copy, Debug)]
pub struct DetLosses {
    pub cls: Var,
    pub reg: Var,
    pub dfl: Var,
}

/// One positive anchor flattened across levels and images.
#[derive(Clone, Debug)]
struct Positive {
    level: usize,
    row: usize,
    stride: f32,
    gt: BBox,
    point: (f32, f32),
    target: [f32; 4],
}

/// Softmax expectation of each side's bins in stride units, `P x 4D -> P x 4`.
pub fn expected_offsets(g: &mut Graph, reg_rows: Var, bins: usize) -> Result<Var> {
    let p = g.shape(reg_rows)[0];
    let sides = g.reshape(reg_rows, &[p * 4, bins])?;
    let probs = g.softmax(sides)?;
    let proj = g.constant(Tensor::from_fn(&[bins, 1], |i| i as f32));
    let e = g.matmul(probs, proj)?;
    g.reshape(e, &[p, 4])
}

/// Mean `1 - GIoU` between predicted offset boxes and target offset boxes, both given as
/// `P x 4` distances `(l, t, r, b)` from a shared anchor point.
pub fn giou_loss(g: &mut Graph, pred: Var, target: &Tensor) -> Result<Var> {
    let p = g.shape(pred)[0];
    if target.shape() != [p, 4] {
        return Err(Error::ShapeMismatch {
            op: "giou_loss",
            lhs: g.shape(pred).to_vec(),
            rhs: target.shape().to_vec(),
        });
    }
    let cols = g.split(pred, 1, &[1, 1, 1, 1])?;
    let tcol = |j: usize| Tensor::from_fn(&[p, 1], |i| target.data()[i * 4 + j]);
    let tv: Vec<Var> = (0..4).map(|j| g.constant(tcol(j))).collect();
    let (l, t, r, b) = (cols[0], cols[1], cols[2], cols[3]);
    let (gl, gt, gr, gb) = (tv[0], tv[1], tv[2], tv[3]);

    let pw = g.add(l, r)?;
    let ph = g.add(t, b)?;
    let area_p = g.mul(pw, ph)?;
    let area_g = g.constant(Tensor::from_fn(&[p, 1], |i| {
        let d = &target.data()[i * 4..i * 4 + 4];
        (d[0] + d[2]) * (d[1] + d[3])
    }));

    let overlap = |lo: [Var; 2], hi: [Var; 2], g: &mut Graph| -> Result<(Var, Var)> {
        let a = g.minimum(lo[0], lo[1])?;
        let b = g.minimum(hi[0], hi[1])?;
        let inner = g.add(a, b)?;
        let inner = g.relu(inner);
        let c = g.maximum(lo[0], lo[1])?;
        let d = g.maximum(hi[0], hi[1])?;
        let outer = g.add(c, d)?;
        Ok((inner, outer))
    };
    let (iw, cw) = overlap([l, gl], [r, gr], g)?;
    let (ih, ch) = overlap([t, gt], [b, gb], g)?;
    let inter = g.mul(iw, ih)?;
    let sum_area = g.add(area_p, area_g)?;
    let union = g.sub(sum_area, inter)?;
    let union_eps = g.add_scalar(union, EPS);
    let iou = g.div(inter, union_eps)?;
    let c_area = g.mul(cw, ch)?;
    let c_area = g.add_scalar(c_area, EPS);
    let gap = g.sub(c_area, union)?;
    let penalty = g.div(gap, c_area)?;
    let giou = g.sub(iou, penalty)?;
    let loss = g.neg(giou);
    let loss = g.add_scalar(loss, 1.0);
    Ok(g.mean(loss))
}

/// Two-hot target distribution over `bins` for a continuous target in `[0, bins-1)`.
pub fn two_hot(t: f32, bins: usize) -> Vec<f32> {
    let mut out = vec![0.0; bins];
    let left = (t.floor() as usize).min(bins - 2);
    let wr = t - left as f32;
    out[left] = 1.0 - wr;
    out[left + 1] = wr;
    out
}

/// Classification, box and distribution losses over a batch. `levels` are the batched head
/// outputs, `anchors[l]` the level geometry, and `gts[b]`/`asg[b]` the annotations and
/// assignment of image `b`. Box and distribution losses average over positives; the
/// classification loss sums over all anchors and divides by `max(1, positives)`.
pub fn detection_loss(
    g: &mut Graph,
    levels: &[LevelVars],
    anchors: &[AnchorLevel],
    gts: &[Vec<Annotation>],
    asg: &[AssignmentResult],
    bins: usize,
) -> Result<DetLosses> {
    let batch = asg.len();
    if gts.len() != batch || levels.len() != anchors.len() {
        return Err(Error::invalid("detection_loss: batch or level count mismatch"));
    }
    let num_classes = g.shape(levels[0].cls)[1];
    let mut positives = Vec::new();
    for (l, (lv, level)) in levels.iter().zip(anchors).enumerate() {
        let n = level.len();
        if g.shape(lv.cls)[0] != n * batch {
            return Err(Error::invalid(format!("level {l}: {} rows for {batch} x {n} anchors", g.shape(lv.cls)[0])));
        }
        for b in 0..batch {
            let la = &asg[b].levels[l];
            for a in 0..n {
                if let Some(gi) = la.gt[a] {
                    positives.push(Positive {
                        level: l,
                        row: b * n + a,
                        stride: level.stride as f32,
                        gt: gts[b][gi].bbox,
                        point: level.point(a),
                        target: la.targets[a],
                    });
                }
            }
        }
    }
    let num_pos = positives.len();

    // quality targets: IoU of the (detached) decoded prediction with its GT
    let mut cls_total: Option<Var> = None;
    for (l, (lv, level)) in levels.iter().zip(anchors).enumerate() {
        let n = level.len();
        let mut target = Tensor::zeros(&[n * batch, num_classes]);
        let reg = g.value(lv.reg).clone();
        let k = reg.shape()[1];
        for b in 0..batch {
            let la = &asg[b].levels[l];
            for a in 0..n {
                if let Some(gi) = la.gt[a] {
                    let row = b * n + a;
                    let pred = decode_distribution(&reg.data()[row * k..(row + 1) * k], level.point(a), level.stride as f32)?;
                    let q = overlap_metrics(&pred, &gts[b][gi].bbox).iou;
                    target.data_mut()[row * num_classes + gts[b][gi].class] = q;
                }
            }
        }
        let term = g.quality_focal(lv.cls, &target, QFL_BETA)?;
        cls_total = Some(match cls_total {
            Some(t) => g.add(t, term)?,
            None => term,
        });
    }
    let cls_sum = cls_total.ok_or_else(|| Error::invalid("detection_loss: no levels"))?;
    let cls = g.mul_scalar(cls_sum, 1.0 / num_pos.max(1) as f32);

    if num_pos == 0 {
        let zero = g.constant(Tensor::scalar(0.0));
        return Ok(DetLosses { cls, reg: zero, dfl: zero });
    }

    let mut gathered = Vec::new();
    for (l, lv) in levels.iter().enumerate() {
        let rows: Vec<usize> = positives.iter().filter(|p| p.level == l).map(|p| p.row).collect();
        if !rows.is_empty() {
            gathered.push(g.gather_rows(lv.reg, &rows)?);
        }
    }
    // positives are ordered by level, so the concatenation order matches `positives`
    let reg_rows = if gathered.len() == 1 { gathered[0] } else { g.concat(&gathered, 0)? };

    let offsets = expected_offsets(g, reg_rows, bins)?;
    let mut box_targets = Tensor::zeros(&[num_pos, 4]);
    for (i, p) in positives.iter().enumerate() {
        let raw = super::assign::raw_offsets(p.point, &p.gt, p.stride);
        box_targets.data_mut()[i * 4..i * 4 + 4].copy_from_slice(&raw);
    }
    let reg = giou_loss(g, offsets, &box_targets)?;

    let sides = g.reshape(reg_rows, &[num_pos * 4, bins])?;
    let mut dist = Vec::with_capacity(num_pos * 4 * bins);
    for p in &positives {
        for t in p.target {
            dist.extend(two_hot(t, bins));
        }
    }
    let dist = Tensor::new(vec![num_pos * 4, bins], dist)?;
    let w = vec![1.0 / (num_pos * 4) as f32; num_pos * 4];
    let dfl = g.softmax_cross_entropy(sides, &dist, &w, 1.0, false)?;
    Ok(DetLosses { cls, reg, dfl })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_hot_splits_mass() {
        assert_eq!(two_hot(2.25, 8), vec![0.0, 0.0, 0.75, 0.25, 0.0, 0.0, 0.0, 0.0]);
        let top = two_hot(6.99, 8);
        assert!((top[6] - 0.01).abs() < 1e-5 && (top[7] - 0.99).abs() < 1e-5);
    }

    #[test]
    fn perfect_box_has_zero_giou_loss() {
        let mut g = Graph::new();
        let t = Tensor::new(vec![2, 4], vec![1.0, 2.0, 3.0, 0.5, 0.2, 0.2, 0.2, 0.2]).unwrap();
        let p = g.param(t.clone());
        let l = giou_loss(&mut g, p, &t).unwrap();
        assert!(g.value(l).item().abs() < 1e-5);
    }

    #[test]
    fn disjoint_box_loss_exceeds_one() {
        let mut g = Graph::new();
        let pred = g.param(Tensor::new(vec![1, 4], vec![0.0, 0.0, 1.0, 1.0]).unwrap());
        // target box [-2,-2]..[-1,-1] relative to the anchor
        let t = Tensor::new(vec![1, 4], vec![2.0, 2.0, -1.0, -1.0]).unwrap();
        let l = giou_loss(&mut g, pred, &t).unwrap();
        assert!((g.value(l).item() - (1.0 + 7.0 / 9.0)).abs() < 1e-5);
    }
}
