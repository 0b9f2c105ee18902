use rand::Rng;

use super::ModelConfig;
use crate::error::{Error, Result};
use crate::lightml::{self, LightMLParams};
use crate::tensor::{Graph, LayerKind, NetworkSpec, ParamBinder, ParamStore, Tensor, Var};

/// Foreground prior used to initialise the classification bias.
pub const CLS_PRIOR: f32 = 0.01;

pub const LIGHT_ML_PREFIX: &str = "head.lightml";

fn conv_init(store: &mut ParamStore, name: &str, cout: usize, cin: usize, k: usize, rng: &mut impl Rng) {
    let std = (2.0 / (cin * k * k) as f32).sqrt();
    store.insert(format!("{name}.weight"), Tensor::randn(&[cout, cin, k, k], std, rng));
    store.insert(format!("{name}.bias"), Tensor::zeros(&[cout]));
}

pub fn init_params(cfg: &ModelConfig, rng: &mut impl Rng) -> Result<ParamStore> {
    cfg.validate()?;
    let mut store = ParamStore::new();
    let mut cin = 3;
    for (i, (&w, &d)) in cfg.widths.iter().zip(&cfg.depths).enumerate() {
        conv_init(&mut store, &format!("backbone.s{i}.down"), w, cin, 3, rng);
        for j in 0..d {
            conv_init(&mut store, &format!("backbone.s{i}.conv{j}"), w, w, 3, rng);
        }
        cin = w;
    }
    let c = cfg.head_channels;
    for (l, &s) in cfg.strides.iter().enumerate() {
        let w = cfg.widths[ModelConfig::stage_for_stride(s)];
        conv_init(&mut store, &format!("fpn.lateral{l}"), c, w, 1, rng);
    }
    for i in 0..cfg.head_convs {
        conv_init(&mut store, &format!("head.cls{i}"), c, c, 3, rng);
        conv_init(&mut store, &format!("head.reg{i}"), c, c, 3, rng);
    }
    store.insert("head.cls_pred.weight", Tensor::randn(&[cfg.num_classes, c, 3, 3], 0.01, rng));
    let prior_bias = -((1.0 - CLS_PRIOR) / CLS_PRIOR).ln();
    store.insert("head.cls_pred.bias", Tensor::full(&[cfg.num_classes], prior_bias));
    store.insert("head.reg_pred.weight", Tensor::randn(&[4 * cfg.bins, c, 3, 3], 0.01, rng));
    store.insert("head.reg_pred.bias", Tensor::zeros(&[4 * cfg.bins]));
    // drawn last so the remaining parameters do not depend on the Light-ML switch
    if cfg.light_ml {
        lightml::init_params(&mut store, LIGHT_ML_PREFIX, c, &cfg.light_ml_params, rng);
    }
    Ok(store)
}

fn conv(g: &mut Graph, p: &mut ParamBinder, name: &str, x: Var, stride: usize, pad: usize) -> Result<Var> {
    let w = p.get(g, &format!("{name}.weight"))?;
    let b = p.get(g, &format!("{name}.bias"))?;
    let y = g.conv2d(x, w, stride, pad)?;
    g.add_channel_bias(y, b)
}

fn conv_relu(g: &mut Graph, p: &mut ParamBinder, name: &str, x: Var, stride: usize) -> Result<Var> {
    let y = conv(g, p, name, x, stride, 1)?;
    Ok(g.relu(y))
}

/// Graph handles for one pyramid level.
#[derive(Clone, Copy, Debug)]
pub struct LevelVars {
    pub stride: usize,
    pub height: usize,
    pub width: usize,
    /// Head branch features entering the prediction convs.
    pub cls_feat: Var,
    pub reg_feat: Var,
    /// `N x C x H x W` classification logits.
    pub cls_map: Var,
    /// `N x 4D x H x W` regression-distribution logits.
    pub reg_map: Var,
    /// `(N*H*W) x C` rows, image-major raster order.
    pub cls: Var,
    /// `(N*H*W) x 4D` rows.
    pub reg: Var,
}

pub fn check_input(cfg: &ModelConfig, shape: &[usize]) -> Result<()> {
    if shape.len() != 4 || shape[1] != 3 {
        return Err(Error::invalid(format!("expected an N x 3 x H x W image batch, got {shape:?}")));
    }
    let s = cfg.max_stride();
    let (h, w) = (shape[2], shape[3]);
    if h % s != 0 || w % s != 0 || h == 0 || w == 0 {
        return Err(Error::invalid(format!(
            "input {h}x{w} must be divisible by stride {s}; pad to {}x{}",
            h.div_ceil(s).max(1) * s,
            w.div_ceil(s).max(1) * s
        )));
    }
    Ok(())
}

pub fn forward(g: &mut Graph, params: &mut ParamBinder, cfg: &ModelConfig, image: Var) -> Result<Vec<LevelVars>> {
    check_input(cfg, g.shape(image))?;
    let mut x = image;
    let mut stages = Vec::with_capacity(cfg.widths.len());
    let last_stage = ModelConfig::stage_for_stride(cfg.max_stride());
    for (i, &d) in cfg.depths.iter().enumerate().take(last_stage + 1) {
        x = conv_relu(g, params, &format!("backbone.s{i}.down"), x, 2)?;
        for j in 0..d {
            x = conv_relu(g, params, &format!("backbone.s{i}.conv{j}"), x, 1)?;
        }
        stages.push(x);
    }

    let n_levels = cfg.strides.len();
    let mut pyramid: Vec<Var> = vec![image; n_levels];
    for l in (0..n_levels).rev() {
        let c = stages[ModelConfig::stage_for_stride(cfg.strides[l])];
        let mut p = conv(g, params, &format!("fpn.lateral{l}"), c, 1, 0)?;
        if l + 1 < n_levels {
            let up = g.upsample_nearest(pyramid[l + 1], cfg.strides[l + 1] / cfg.strides[l])?;
            p = g.add(p, up)?;
        }
        pyramid[l] = p;
    }

    let mut out = Vec::with_capacity(n_levels);
    for (l, &feat) in pyramid.iter().enumerate() {
        let (mut cls, mut reg) = (feat, feat);
        for i in 0..cfg.head_convs {
            cls = conv_relu(g, params, &format!("head.cls{i}"), cls, 1)?;
            reg = conv_relu(g, params, &format!("head.reg{i}"), reg, 1)?;
        }
        if cfg.light_ml {
            (cls, reg) = lightml::light_ml_forward(g, params, LIGHT_ML_PREFIX, cls, reg, &cfg.light_ml_params)?;
        }
        let cls_map = conv(g, params, "head.cls_pred", cls, 1, 1)?;
        let reg_map = conv(g, params, "head.reg_pred", reg, 1, 1)?;
        let s = g.shape(feat).to_vec();
        out.push(LevelVars {
            stride: cfg.strides[l],
            height: s[2],
            width: s[3],
            cls_feat: cls,
            reg_feat: reg,
            cls_map,
            reg_map,
            cls: g.nchw_to_rows(cls_map)?,
            reg: g.nchw_to_rows(reg_map)?,
        });
    }
    Ok(out)
}

/// Forward outputs of one level as plain values.
#[derive(Clone, Debug, PartialEq)]
pub struct LevelOutput {
    pub stride: usize,
    pub height: usize,
    pub width: usize,
    pub cls: Tensor,
    pub reg: Tensor,
    pub reg_map: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DetectionOutput {
    pub batch: usize,
    pub levels: Vec<LevelOutput>,
}

impl DetectionOutput {
    pub fn from_graph(g: &Graph, levels: &[LevelVars]) -> Self {
        DetectionOutput {
            batch: g.shape(levels[0].cls_map)[0],
            levels: levels
                .iter()
                .map(|l| LevelOutput {
                    stride: l.stride,
                    height: l.height,
                    width: l.width,
                    cls: g.value(l.cls).clone(),
                    reg: g.value(l.reg).clone(),
                    reg_map: g.value(l.reg_map).clone(),
                })
                .collect(),
        }
    }

    /// Outputs of image `b` of the batch.
    pub fn image(&self, b: usize) -> DetectionOutput {
        DetectionOutput {
            batch: 1,
            levels: self
                .levels
                .iter()
                .map(|l| {
                    let n = l.height * l.width;
                    let rows = |t: &Tensor| {
                        let k = t.shape()[1];
                        Tensor::new(vec![n, k], t.data()[b * n * k..(b + 1) * n * k].to_vec()).unwrap()
                    };
                    let c = l.reg_map.shape()[1];
                    let map = Tensor::new(
                        vec![1, c, l.height, l.width],
                        l.reg_map.data()[b * c * n..(b + 1) * c * n].to_vec(),
                    )
                    .unwrap();
                    LevelOutput {
                        stride: l.stride,
                        height: l.height,
                        width: l.width,
                        cls: rows(&l.cls),
                        reg: rows(&l.reg),
                        reg_map: map,
                    }
                })
                .collect(),
        }
    }
}

/// Inference-only forward pass.
pub fn predict(cfg: &ModelConfig, store: &ParamStore, images: &Tensor) -> Result<DetectionOutput> {
    let mut g = Graph::inference();
    let mut binder = ParamBinder::new(store, false);
    let x = g.constant(images.clone());
    let levels = forward(&mut g, &mut binder, cfg, x)?;
    Ok(DetectionOutput::from_graph(&g, &levels))
}

/// Conv layers of the detector for FLOP accounting.
pub fn network_spec(cfg: &ModelConfig) -> Result<NetworkSpec> {
    cfg.validate()?;
    let conv = |cin, cout, kernel, stride, pad| LayerKind::Conv2d {
        cin,
        cout,
        kernel,
        stride,
        pad,
    };
    let mut spec = NetworkSpec::default();
    let mut cin = 3;
    let mut at = 1;
    let last_stage = ModelConfig::stage_for_stride(cfg.max_stride());
    for (i, (&w, &d)) in cfg.widths.iter().zip(&cfg.depths).enumerate().take(last_stage + 1) {
        spec.push(format!("backbone.s{i}.down"), conv(cin, w, 3, 2, 1), at);
        at *= 2;
        for j in 0..d {
            spec.push(format!("backbone.s{i}.conv{j}"), conv(w, w, 3, 1, 1), at);
        }
        cin = w;
    }
    let c = cfg.head_channels;
    for (l, &s) in cfg.strides.iter().enumerate() {
        let w = cfg.widths[ModelConfig::stage_for_stride(s)];
        spec.push(format!("fpn.lateral{l}"), conv(w, c, 1, 1, 0), s);
    }
    for &s in &cfg.strides {
        for i in 0..cfg.head_convs {
            spec.push(format!("head.cls{i}@{s}"), conv(c, c, 3, 1, 1), s);
            spec.push(format!("head.reg{i}@{s}"), conv(c, c, 3, 1, 1), s);
        }
        spec.push(format!("head.cls_pred@{s}"), conv(c, cfg.num_classes, 3, 1, 1), s);
        spec.push(format!("head.reg_pred@{s}"), conv(c, 4 * cfg.bins, 3, 1, 1), s);
    }
    if cfg.light_ml {
        spec.extend(lightml::flop_spec(c, &cfg.light_ml_params, &cfg.strides));
    }
    Ok(spec)
}

/// Light-ML settings actually in effect for `cfg`.
pub fn light_ml_of(cfg: &ModelConfig) -> Option<LightMLParams> {
    cfg.light_ml.then_some(cfg.light_ml_params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::sigmoid_scalar;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn output_shapes_at_96() {
        let cfg = ModelConfig::student();
        let store = init_params(&cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let img = Tensor::uniform(&[1, 3, 96, 96], 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(1));
        let out = predict(&cfg, &store, &img).unwrap();
        assert_eq!(out.levels[0].cls.shape(), &[144, 3]);
        assert_eq!(out.levels[1].cls.shape(), &[36, 3]);
        assert_eq!(out.levels[0].reg.shape(), &[144, 32]);
        assert_eq!(out, predict(&cfg, &store, &img).unwrap());
    }

    #[test]
    fn indivisible_input_names_padding() {
        let cfg = ModelConfig::student();
        let store = init_params(&cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let err = predict(&cfg, &store, &Tensor::zeros(&[1, 3, 90, 96])).unwrap_err();
        assert!(err.to_string().contains("96x96"), "{err}");
    }

    #[test]
    fn zero_bias_gives_half_scores() {
        let cfg = ModelConfig::student();
        let mut store = init_params(&cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        for name in ["head.cls_pred.weight", "head.cls_pred.bias"] {
            store.get_mut(name).unwrap().value.data_mut().fill(0.0);
        }
        let out = predict(&cfg, &store, &Tensor::ones(&[1, 3, 32, 32])).unwrap();
        assert!(out.levels[0].cls.data().iter().all(|v| sigmoid_scalar(*v) == 0.5));
        let fresh = init_params(&cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let b = fresh.value("head.cls_pred.bias").unwrap().data()[0];
        assert!((sigmoid_scalar(b) - CLS_PRIOR).abs() < 1e-6);
    }
}
