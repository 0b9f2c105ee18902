//! Axis-aligned box arithmetic in image-pixel coordinates.

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BBox {
    pub x1: f32,
    pub y1: f32,
    pub x2: f32,
    pub y2: f32,
}

impl BBox {
    pub fn new(x1: f32, y1: f32, x2: f32, y2: f32) -> Result<Self> {
        let b = BBox { x1, y1, x2, y2 };
        if !b.is_valid() {
            return Err(Error::invalid(format!("invalid box ({x1}, {y1}, {x2}, {y2})")));
        }
        Ok(b)
    }

    /// Square box of side `side` centered on `(cx, cy)`.
    pub fn centered(cx: f32, cy: f32, side: f32) -> Self {
        let h = side / 2.0;
        BBox {
            x1: cx - h,
            y1: cy - h,
            x2: cx + h,
            y2: cy + h,
        }
    }

    pub fn is_valid(&self) -> bool {
        [self.x1, self.y1, self.x2, self.y2].iter().all(|v| v.is_finite()) && self.x1 <= self.x2 && self.y1 <= self.y2
    }

    pub fn width(&self) -> f32 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f32 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f32 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f32, f32) {
        ((self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0)
    }

    pub fn diagonal(&self) -> f32 {
        self.width().hypot(self.height())
    }

    pub fn contains(&self, x: f32, y: f32) -> bool {
        x >= self.x1 && x <= self.x2 && y >= self.y1 && y <= self.y2
    }

    pub fn clip(&self, width: f32, height: f32) -> Self {
        BBox {
            x1: self.x1.clamp(0.0, width),
            y1: self.y1.clamp(0.0, height),
            x2: self.x2.clamp(0.0, width),
            y2: self.y2.clamp(0.0, height),
        }
    }

    pub fn scale(&self, s: f32) -> Self {
        BBox {
            x1: self.x1 * s,
            y1: self.y1 * s,
            x2: self.x2 * s,
            y2: self.y2 * s,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PointOffsets {
    pub l: f32,
    pub t: f32,
    pub r: f32,
    pub b: f32,
    pub inside: bool,
}

/// Distances from `(x, y)` to the four sides. Points on the boundary count as inside.
pub fn offsets(point: (f32, f32), b: &BBox) -> PointOffsets {
    let (x, y) = point;
    let (l, t, r, bo) = (x - b.x1, y - b.y1, b.x2 - x, b.y2 - y);
    PointOffsets {
        l,
        t,
        r,
        b: bo,
        inside: l >= 0.0 && t >= 0.0 && r >= 0.0 && bo >= 0.0,
    }
}

fn min_max(a: f32, b: f32) -> (f64, f64) {
    if a <= b {
        (a as f64, b as f64)
    } else {
        (b as f64, a as f64)
    }
}

/// `sqrt(min(l,r)/max(l,r) * min(t,b)/max(t,b))`; a side pair that is zero on both ends
/// (degenerate box) gives 0.
///
/// The products of two f32 values are exact in f64, so the radicand is the correctly
/// rounded quotient of the exact ratio.
pub fn centerness(o: &PointOffsets) -> Result<f32> {
    if !o.inside {
        return Err(Error::invalid(format!(
            "centerness of a point outside its box (l={}, t={}, r={}, b={})",
            o.l, o.t, o.r, o.b
        )));
    }
    let (lo_x, hi_x) = min_max(o.l, o.r);
    let (lo_y, hi_y) = min_max(o.t, o.b);
    let den = hi_x * hi_y;
    if den == 0.0 {
        return Ok(0.0);
    }
    Ok(((lo_x * lo_y) / den).sqrt() as f32)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Overlap {
    pub iou: f32,
    pub giou: f32,
    pub diou: f32,
}

/// IoU, GIoU and DIoU, each formed as one fraction in double precision.
///
/// For coordinates on a modest grid every numerator and denominator is exact in f64, so
/// each metric is the correctly rounded value of the exact ratio. A zero-area box has zero
/// overlap with anything except an identical box, which gives (1, 1, 1). When the
/// enclosing box has zero area or zero diagonal the corresponding penalty term is 0.
pub fn overlap_metrics(a: &BBox, b: &BBox) -> Overlap {
    if a == b {
        return Overlap {
            iou: 1.0,
            giou: 1.0,
            diou: 1.0,
        };
    }
    let f = overlap_fractions(a, b);
    let ratio = |(n, d): (f64, f64)| if d > 0.0 { (n / d) as f32 } else { 0.0 };
    Overlap {
        iou: ratio(f.iou),
        giou: ratio(f.giou),
        diou: ratio(f.diou),
    }
}

/// IoU in double precision; orders distinct grid-aligned overlaps exactly.
pub fn iou_f64(a: &BBox, b: &BBox) -> f64 {
    if a == b {
        return 1.0;
    }
    let (n, d) = overlap_fractions(a, b).iou;
    if d > 0.0 {
        n / d
    } else {
        0.0
    }
}

struct Fractions {
    iou: (f64, f64),
    giou: (f64, f64),
    diou: (f64, f64),
}

fn overlap_fractions(a: &BBox, b: &BBox) -> Fractions {
    let (ax1, ay1, ax2, ay2) = (a.x1 as f64, a.y1 as f64, a.x2 as f64, a.y2 as f64);
    let (bx1, by1, bx2, by2) = (b.x1 as f64, b.y1 as f64, b.x2 as f64, b.y2 as f64);
    let area_a = (ax2 - ax1) * (ay2 - ay1);
    let area_b = (bx2 - bx1) * (by2 - by1);
    let iw = (ax2.min(bx2) - ax1.max(bx1)).max(0.0);
    let ih = (ay2.min(by2) - ay1.max(by1)).max(0.0);
    let inter = iw * ih;
    let union = area_a + area_b - inter;
    if union <= 0.0 {
        return Fractions {
            iou: (0.0, 0.0),
            giou: (0.0, 0.0),
            diou: (0.0, 0.0),
        };
    }

    let cw = ax2.max(bx2) - ax1.min(bx1);
    let ch = ay2.max(by2) - ay1.min(by1);
    let c_area = cw * ch;
    // iou - (c - u) / c = (inter * c - (c - u) * u) / (u * c)
    let giou = if c_area > 0.0 {
        (inter * c_area - (c_area - union) * union, union * c_area)
    } else {
        (inter, union)
    };

    let diag2 = cw * cw + ch * ch;
    let dx = ax1 + ax2 - bx1 - bx2;
    let dy = ay1 + ay2 - by1 - by2;
    // center distance squared is (dx^2 + dy^2) / 4
    let diou = if diag2 > 0.0 {
        (4.0 * inter * diag2 - (dx * dx + dy * dy) * union, 4.0 * union * diag2)
    } else {
        (inter, union)
    };
    Fractions {
        iou: (inter, union),
        giou,
        diou,
    }
}

/// Expected bin index of a softmax over `logits`.
pub fn distribution_expectation(logits: &[f32]) -> f32 {
    let m = logits.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    let mut z = 0.0f64;
    let mut e = 0.0f64;
    for (i, v) in logits.iter().enumerate() {
        let p = ((v - m) as f64).exp();
        z += p;
        e += p * i as f64;
    }
    (e / z) as f32
}

/// Decodes `4 x D` side logits (left, top, right, bottom) into a box around `anchor`.
pub fn decode_distribution(reg_logits: &[f32], anchor: (f32, f32), stride: f32) -> Result<BBox> {
    if reg_logits.len() % 4 != 0 || reg_logits.len() < 8 {
        return Err(Error::invalid(format!(
            "regression logits must be 4 x D with D >= 2, got {} values",
            reg_logits.len()
        )));
    }
    let d = reg_logits.len() / 4;
    let side = |s: usize| (distribution_expectation(&reg_logits[s * d..(s + 1) * d]) * stride).max(0.0);
    let (x, y) = anchor;
    Ok(BBox {
        x1: x - side(0),
        y1: y - side(1),
        x2: x + side(2),
        y2: y + side(3),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct AnchorLevel {
    pub stride: usize,
    pub height: usize,
    pub width: usize,
}

impl AnchorLevel {
    pub fn len(&self) -> usize {
        self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Grid-cell center of anchor `idx` in raster order.
    pub fn point(&self, idx: usize) -> (f32, f32) {
        let (i, j) = (idx / self.width, idx % self.width);
        let s = self.stride as f32;
        ((j as f32 + 0.5) * s, (i as f32 + 0.5) * s)
    }

    pub fn points(&self) -> Vec<(f32, f32)> {
        (0..self.len()).map(|i| self.point(i)).collect()
    }
}

/// Anchor points for every pyramid level of an `height x width` image.
#[derive(Clone, Debug, PartialEq)]
pub struct AnchorGrid {
    pub levels: Vec<AnchorLevel>,
}

impl AnchorGrid {
    pub fn new(height: usize, width: usize, strides: &[usize]) -> Result<Self> {
        let mut levels = Vec::with_capacity(strides.len());
        for &s in strides {
            if s == 0 || height % s != 0 || width % s != 0 {
                return Err(Error::invalid(format!(
                    "image {height}x{width} is not divisible by stride {s}"
                )));
            }
            levels.push(AnchorLevel {
                stride: s,
                height: height / s,
                width: width / s,
            });
        }
        Ok(AnchorGrid { levels })
    }

    pub fn total(&self) -> usize {
        self.levels.iter().map(|l| l.len()).sum()
    }
}
