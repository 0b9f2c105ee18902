//! Lightweight mutual lifting between the classification and regression branches.
//!
//! Each branch feature is split into a convolved part of `round(k*C)` channels and a
//! shuffled part of the remaining channels. The convolved parts of both branches are
//! concatenated and fused by one 3x3 conv; the shuffled parts are concatenated and
//! channel-shuffled with two groups. Both results are split evenly back into the branches,
//! conv half first.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Graph, LayerKind, NetworkSpec, ParamBinder, ParamStore, Tensor, Var};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Activation {
    #[default]
    Identity,
    Relu,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LightMLParams {
    pub ratio: f32,
    pub activation: Activation,
}

impl Default for LightMLParams {
    fn default() -> Self {
        LightMLParams {
            ratio: 0.25,
            activation: Activation::Identity,
        }
    }
}

impl LightMLParams {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.ratio) {
            return Err(Error::Config(format!("light-ml ratio {} outside [0, 1]", self.ratio)));
        }
        Ok(())
    }

    /// Channels per branch routed through the fusion conv.
    pub fn conv_channels(&self, channels: usize) -> usize {
        ((self.ratio as f64 * channels as f64).round() as usize).min(channels)
    }
}

/// Output channel `i` takes input channel `perm[i]`.
pub fn shuffle_permutation(channels: usize, groups: usize) -> Result<Vec<usize>> {
    if groups == 0 || channels % groups != 0 {
        return Err(Error::invalid(format!(
            "channel shuffle: {channels} channels not divisible into {groups} groups"
        )));
    }
    let per = channels / groups;
    Ok((0..channels).map(|i| (i % groups) * per + i / groups).collect())
}

pub fn channel_shuffle(g: &mut Graph, x: Var, groups: usize) -> Result<Var> {
    let s = g.shape(x).to_vec();
    if s.len() != 4 {
        return Err(Error::invalid(format!("channel shuffle needs NCHW, got {s:?}")));
    }
    let perm = shuffle_permutation(s[1], groups)?;
    g.permute_channels(x, perm)
}

pub fn weight_name(prefix: &str) -> String {
    format!("{prefix}.fuse.weight")
}

pub fn bias_name(prefix: &str) -> String {
    format!("{prefix}.fuse.bias")
}

/// Registers the fusion conv under `prefix`. The kernel starts as a small perturbation of the
/// identity so an untrained module passes features through unchanged on the conv path.
pub fn init_params(store: &mut ParamStore, prefix: &str, channels: usize, p: &LightMLParams, rng: &mut impl Rng) {
    let kc = p.conv_channels(channels);
    if kc == 0 {
        return;
    }
    let c = 2 * kc;
    let mut w = Tensor::randn(&[c, c, 3, 3], 0.01, rng);
    for o in 0..c {
        w.data_mut()[((o * c + o) * 3 + 1) * 3 + 1] += 1.0;
    }
    store.insert(weight_name(prefix), w);
    store.insert(bias_name(prefix), Tensor::zeros(&[c]));
}

pub fn light_ml_forward(
    g: &mut Graph,
    params: &mut ParamBinder,
    prefix: &str,
    f_cls: Var,
    f_reg: Var,
    p: &LightMLParams,
) -> Result<(Var, Var)> {
    p.validate()?;
    let shape = g.shape(f_cls).to_vec();
    if shape != g.shape(f_reg) {
        return Err(Error::ShapeMismatch {
            op: "light_ml_forward",
            lhs: shape,
            rhs: g.shape(f_reg).to_vec(),
        });
    }
    if shape.len() != 4 {
        return Err(Error::invalid(format!("light-ml needs NCHW features, got {shape:?}")));
    }
    let c = shape[1];
    let kc = p.conv_channels(c);
    let sc = c - kc;

    let mut cls_parts = Vec::new();
    let mut reg_parts = Vec::new();
    if kc > 0 {
        let cls_c = g.slice(f_cls, 1, 0, kc)?;
        let reg_c = g.slice(f_reg, 1, 0, kc)?;
        let joined = g.concat(&[cls_c, reg_c], 1)?;
        let w = params.get(g, &weight_name(prefix))?;
        let b = params.get(g, &bias_name(prefix))?;
        let fused = g.conv2d(joined, w, 1, 1)?;
        let mut fused = g.add_channel_bias(fused, b)?;
        if p.activation == Activation::Relu {
            fused = g.relu(fused);
        }
        let halves = g.split(fused, 1, &[kc, kc])?;
        cls_parts.push(halves[0]);
        reg_parts.push(halves[1]);
    }
    if sc > 0 {
        let cls_s = g.slice(f_cls, 1, kc, sc)?;
        let reg_s = g.slice(f_reg, 1, kc, sc)?;
        let joined = g.concat(&[cls_s, reg_s], 1)?;
        let shuffled = channel_shuffle(g, joined, 2)?;
        let halves = g.split(shuffled, 1, &[sc, sc])?;
        cls_parts.push(halves[0]);
        reg_parts.push(halves[1]);
    }
    let out_cls = if cls_parts.len() == 1 { cls_parts[0] } else { g.concat(&cls_parts, 1)? };
    let out_reg = if reg_parts.len() == 1 { reg_parts[0] } else { g.concat(&reg_parts, 1)? };
    Ok((out_cls, out_reg))
}

/// The fusion conv at every pyramid level, for FLOP accounting.
pub fn flop_spec(channels: usize, p: &LightMLParams, strides: &[usize]) -> NetworkSpec {
    let mut spec = NetworkSpec::default();
    let kc = p.conv_channels(channels);
    spec.push("lightml.shuffle", LayerKind::ChannelShuffle, strides.first().copied().unwrap_or(1));
    if kc == 0 {
        return spec;
    }
    for &s in strides {
        spec.push(
            format!("lightml.fuse@{s}"),
            LayerKind::Conv2d {
                cin: 2 * kc,
                cout: 2 * kc,
                kernel: 3,
                stride: 1,
                pad: 1,
            },
            s,
        );
    }
    spec
}
