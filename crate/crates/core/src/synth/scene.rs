use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Annotation, Dataset, ImageRecord};
use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::tensor::Tensor;

const PALETTE: [[f32; 3]; 3] = [[0.9, 0.2, 0.15], [0.15, 0.45, 0.95], [0.95, 0.85, 0.1]];
const CLASS_NAMES: [&str; 3] = ["block", "disc", "cross"];

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub min_size: usize,
    pub max_size: usize,
    /// Cap on annotated area as a fraction of the image.
    pub max_fg_fraction: f32,
    /// Amplitude of the background noise.
    pub clutter: f32,
    /// Unannotated line and outline shapes per image, inclusive range.
    pub min_distractors: usize,
    pub max_distractors: usize,
    pub num_classes: usize,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            height: 96,
            width: 96,
            min_objects: 2,
            max_objects: 6,
            min_size: 4,
            max_size: 12,
            max_fg_fraction: 0.05,
            clutter: 0.35,
            min_distractors: 4,
            max_distractors: 10,
            num_classes: 3,
            seed: 7,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(format!("scene spec: {m}")));
        if self.min_size < 2 || self.min_size > self.max_size {
            return fail("object sizes need 2 <= min_size <= max_size");
        }
        if self.max_size > self.height.min(self.width) {
            return fail("objects larger than the image");
        }
        if !(self.max_fg_fraction > 0.0 && self.max_fg_fraction <= 1.0) {
            return fail("foreground fraction must be in (0, 1]");
        }
        if self.min_objects > self.max_objects || self.min_distractors > self.max_distractors {
            return fail("count ranges must have min <= max");
        }
        if self.num_classes == 0 {
            return fail("num_classes must be positive");
        }
        Ok(())
    }

    pub fn categories(&self) -> Vec<String> {
        (0..self.num_classes)
            .map(|c| {
                let base = CLASS_NAMES[c % CLASS_NAMES.len()];
                if c < CLASS_NAMES.len() {
                    base.to_string()
                } else {
                    format!("{base}{}", c / CLASS_NAMES.len())
                }
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub image: Tensor,
    pub annotations: Vec<Annotation>,
    /// Objects drawn for the count; fewer may be placed when the foreground budget runs out.
    pub requested: usize,
}

struct Canvas {
    h: usize,
    w: usize,
    data: Vec<f32>,
}

impl Canvas {
    fn blend(&mut self, x: usize, y: usize, color: [f32; 3], shade: f32) {
        let plane = self.h * self.w;
        for (c, v) in color.iter().enumerate() {
            self.data[c * plane + y * self.w + x] = (v * shade).clamp(0.0, 1.0);
        }
    }
}

/// Bilinear value noise with lattice spacing `cell`.
fn value_noise(h: usize, w: usize, cell: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let gh = h / cell + 2;
    let gw = w / cell + 2;
    let lattice: Vec<f32> = (0..gh * gw).map(|_| rng.random::<f32>()).collect();
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        let fy = y as f32 / cell as f32;
        let (iy, ty) = (fy as usize, fy.fract());
        for x in 0..w {
            let fx = x as f32 / cell as f32;
            let (ix, tx) = (fx as usize, fx.fract());
            let at = |i: usize, j: usize| lattice[i * gw + j];
            let top = at(iy, ix) * (1.0 - tx) + at(iy, ix + 1) * tx;
            let bot = at(iy + 1, ix) * (1.0 - tx) + at(iy + 1, ix + 1) * tx;
            out[y * w + x] = top * (1.0 - ty) + bot * ty;
        }
    }
    out
}

fn background(spec: &SceneSpec, rng: &mut ChaCha8Rng) -> Canvas {
    let (h, w) = (spec.height, spec.width);
    let coarse = value_noise(h, w, 24, rng);
    let fine = value_noise(h, w, 6, rng);
    let base = [0.38, 0.42, 0.33];
    let tint: [f32; 3] = [rng.random_range(0.8..1.2), rng.random_range(0.8..1.2), rng.random_range(0.8..1.2)];
    let mut data = vec![0.0; 3 * h * w];
    for c in 0..3 {
        for p in 0..h * w {
            let n = 0.65 * (coarse[p] - 0.5) + 0.35 * (fine[p] - 0.5);
            data[c * h * w + p] = (base[c] * tint[c] + spec.clutter * n).clamp(0.0, 1.0);
        }
    }
    Canvas { h, w, data }
}

fn draw_distractor(canvas: &mut Canvas, rng: &mut ChaCha8Rng) {
    let color = PALETTE[rng.random_range(0..PALETTE.len())];
    let (h, w) = (canvas.h as i64, canvas.w as i64);
    let x0 = rng.random_range(0..w);
    let y0 = rng.random_range(0..h);
    if rng.random_bool(0.5) {
        // one-pixel line, axis-aligned or diagonal
        let len = rng.random_range(6..=16);
        let (dx, dy) = [(1, 0), (0, 1), (1, 1), (1, -1)][rng.random_range(0..4)];
        for t in 0..len {
            let (x, y) = (x0 + dx * t, y0 + dy * t);
            if (0..w).contains(&x) && (0..h).contains(&y) {
                canvas.blend(x as usize, y as usize, color, 0.9);
            }
        }
    } else {
        // hollow outline
        let side = rng.random_range(6..=14);
        for t in 0..side {
            for (x, y) in [(x0 + t, y0), (x0 + t, y0 + side - 1), (x0, y0 + t), (x0 + side - 1, y0 + t)] {
                if (0..w).contains(&x) && (0..h).contains(&y) {
                    canvas.blend(x as usize, y as usize, color, 0.9);
                }
            }
        }
    }
}

/// Pixel coverage of class `class` inside a `w x h` cell at `(px, py)`.
fn covers(class: usize, px: usize, py: usize, w: usize, h: usize) -> bool {
    match class % 3 {
        0 => true,
        1 => {
            let (cx, cy) = (w as f32 / 2.0, h as f32 / 2.0);
            let (dx, dy) = ((px as f32 + 0.5 - cx) / cx, (py as f32 + 0.5 - cy) / cy);
            dx * dx + dy * dy <= 1.0
        }
        _ => {
            let bw = (w / 3).max(1);
            let bh = (h / 3).max(1);
            let in_v = px >= (w - bw) / 2 && px < (w - bw) / 2 + bw;
            let in_h = py >= (h - bh) / 2 && py < (h - bh) / 2 + bh;
            in_v || in_h
        }
    }
}

fn overlaps(a: &BBox, b: &BBox, margin: f32) -> bool {
    a.x1 < b.x2 + margin && b.x1 < a.x2 + margin && a.y1 < b.y2 + margin && b.y1 < a.y2 + margin
}

/// Scene `index` of the stream defined by `spec.seed`.
pub fn generate_scene(spec: &SceneSpec, index: u64) -> Result<Scene> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index);
    let mut canvas = background(spec, &mut rng);
    let n_distractors = rng.random_range(spec.min_distractors..=spec.max_distractors);
    for _ in 0..n_distractors {
        draw_distractor(&mut canvas, &mut rng);
    }

    let requested = rng.random_range(spec.min_objects..=spec.max_objects);
    let budget = spec.max_fg_fraction as f64 * (spec.height * spec.width) as f64;
    let mut used = 0.0f64;
    let mut annotations: Vec<Annotation> = Vec::new();
    for _ in 0..requested {
        for _attempt in 0..30 {
            let w = rng.random_range(spec.min_size..=spec.max_size);
            let h = rng.random_range(spec.min_size..=spec.max_size);
            let x = rng.random_range(0..=spec.width - w);
            let y = rng.random_range(0..=spec.height - h);
            let bbox = BBox {
                x1: x as f32,
                y1: y as f32,
                x2: (x + w) as f32,
                y2: (y + h) as f32,
            };
            if used + (w * h) as f64 > budget || annotations.iter().any(|a| overlaps(&a.bbox, &bbox, 2.0)) {
                continue;
            }
            let class = rng.random_range(0..spec.num_classes);
            let color = PALETTE[class % PALETTE.len()];
            for py in 0..h {
                for px in 0..w {
                    if covers(class, px, py, w, h) {
                        let shade = rng.random_range(0.85..1.05);
                        canvas.blend(x + px, y + py, color, shade);
                    }
                }
            }
            used += (w * h) as f64;
            annotations.push(Annotation { bbox, class });
            break;
        }
    }
    Ok(Scene {
        image: Tensor::new(vec![3, spec.height, spec.width], canvas.data)?,
        annotations,
        requested,
    })
}

/// Scenes `start..start+count`, generated on up to `threads` workers and merged by index.
pub fn generate_dataset(spec: &SceneSpec, split: &str, start: u64, count: usize, threads: usize) -> Result<Dataset> {
    spec.validate()?;
    let threads = threads.clamp(1, count.max(1));
    let chunk = count.div_ceil(threads).max(1);
    let mut scenes: Vec<(u64, Scene)> = Vec::with_capacity(count);
    std::thread::scope(|s| -> Result<()> {
        let handles: Vec<_> = (0..threads)
            .map(|t| {
                let lo = (t * chunk).min(count);
                let hi = ((t + 1) * chunk).min(count);
                s.spawn(move || {
                    (lo..hi)
                        .map(|i| generate_scene(spec, start + i as u64).map(|sc| (start + i as u64, sc)))
                        .collect::<Result<Vec<_>>>()
                })
            })
            .collect();
        for h in handles {
            scenes.extend(h.join().expect("scene worker panicked")?);
        }
        Ok(())
    })?;
    scenes.sort_by_key(|(i, _)| *i);
    let mut ds = Dataset::new(split, spec.categories());
    for (i, sc) in scenes {
        ds.images.push(ImageRecord {
            id: i,
            file_name: format!("{split}_{i:06}.ppm"),
            width: spec.width,
            height: spec.height,
            pixels: Some(sc.image),
        });
        ds.annotations.push(sc.annotations);
    }
    Ok(ds)
}

/// Mirrors a `3 x H x W` image and its boxes left to right.
pub fn hflip(image: &Tensor, anns: &[Annotation]) -> (Tensor, Vec<Annotation>) {
    let s = image.shape();
    let (h, w) = (s[1], s[2]);
    let mut out = image.clone();
    for plane in 0..3 {
        for y in 0..h {
            let row = &mut out.data_mut()[(plane * h + y) * w..(plane * h + y + 1) * w];
            row.reverse();
        }
    }
    let wf = w as f32;
    let anns = anns
        .iter()
        .map(|a| Annotation {
            bbox: BBox {
                x1: wf - a.bbox.x2,
                y1: a.bbox.y1,
                x2: wf - a.bbox.x1,
                y2: a.bbox.y2,
            },
            class: a.class,
        })
        .collect();
    (out, anns)
}
