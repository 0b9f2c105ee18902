use crate::error::{Error, Result};
use crate::synth::Annotation;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct CosineMap {
    pub height: usize,
    pub width: usize,
    /// `1 - cos` per pixel, in `[0, 2]`.
    pub values: Vec<f32>,
    /// Pixels where either channel vector is zero; their distance is reported as 1.
    pub zero: Vec<bool>,
}

impl CosineMap {
    pub fn mean(&self) -> f64 {
        self.values.iter().map(|v| *v as f64).sum::<f64>() / self.values.len().max(1) as f64
    }

    /// Mean over cells whose centers lie within `scale` diagonals of a GT center, for GTs
    /// accepted by `keep`. The map is taken to sit at `stride` pixels per cell.
    pub fn mean_near(&self, gts: &[Annotation], stride: usize, scale: f32, keep: impl Fn(&Annotation) -> bool) -> Option<f64> {
        let (mut sum, mut n) = (0.0f64, 0usize);
        for i in 0..self.height {
            for j in 0..self.width {
                let (x, y) = ((j as f32 + 0.5) * stride as f32, (i as f32 + 0.5) * stride as f32);
                let near = gts.iter().filter(|g| keep(g)).any(|g| {
                    let (cx, cy) = g.bbox.center();
                    (x - cx).hypot(y - cy) <= scale * g.bbox.diagonal()
                });
                if near {
                    sum += self.values[i * self.width + j] as f64;
                    n += 1;
                }
            }
        }
        (n > 0).then(|| sum / n as f64)
    }

    /// `rows` lines of comma-separated values.
    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        for row in self.values.chunks(self.width.max(1)) {
            let cells: Vec<String> = row.iter().map(|v| format!("{v:.6}")).collect();
            s.push_str(&cells.join(","));
            s.push('\n');
        }
        s
    }
}

/// Cosine distance over channels at each pixel of two `C x H x W` (or `1 x C x H x W`) maps.
pub fn cosine_distance_map(teacher: &Tensor, student: &Tensor) -> Result<CosineMap> {
    if teacher.shape() != student.shape() {
        return Err(Error::ShapeMismatch {
            op: "cosine_distance_map",
            lhs: teacher.shape().to_vec(),
            rhs: student.shape().to_vec(),
        });
    }
    let s = teacher.shape();
    let (c, h, w) = match s {
        [c, h, w] => (*c, *h, *w),
        [1, c, h, w] => (*c, *h, *w),
        _ => return Err(Error::invalid(format!("cosine map needs C x H x W, got {s:?}"))),
    };
    let plane = h * w;
    let (t, u) = (teacher.data(), student.data());
    let mut values = Vec::with_capacity(plane);
    let mut zero = Vec::with_capacity(plane);
    for p in 0..plane {
        let (mut dot, mut nt, mut ns) = (0.0f64, 0.0f64, 0.0f64);
        for ch in 0..c {
            let (a, b) = (t[ch * plane + p] as f64, u[ch * plane + p] as f64);
            dot += a * b;
            nt += a * a;
            ns += b * b;
        }
        if nt == 0.0 || ns == 0.0 {
            values.push(1.0);
            zero.push(true);
        } else {
            let cos = (dot / (nt.sqrt() * ns.sqrt())).clamp(-1.0, 1.0);
            values.push((1.0 - cos) as f32);
            zero.push(false);
        }
    }
    Ok(CosineMap {
        height: h,
        width: w,
        values,
        zero,
    })
}
