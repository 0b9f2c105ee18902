//! Analytic FLOP accounting. One multiply-accumulate counts as one FLOP; only
//! convolutions and linear layers contribute.

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub enum LayerKind {
    Conv2d {
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    },
    Linear {
        inputs: usize,
        outputs: usize,
    },
    ChannelShuffle,
    Pool {
        kernel: usize,
        stride: usize,
    },
    Upsample,
}

/// A layer evaluated on the feature map at `input_stride` relative to the network input.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerSpec {
    pub name: String,
    pub kind: LayerKind,
    pub input_stride: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct NetworkSpec {
    pub layers: Vec<LayerSpec>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerFlops {
    pub name: String,
    pub flops: u64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct FlopReport {
    pub layers: Vec<LayerFlops>,
    pub total: u64,
}

impl FlopReport {
    pub fn gflops(&self) -> f64 {
        self.total as f64 / 1e9
    }
}

impl NetworkSpec {
    pub fn push(&mut self, name: impl Into<String>, kind: LayerKind, input_stride: usize) {
        self.layers.push(LayerSpec {
            name: name.into(),
            kind,
            input_stride,
        });
    }

    pub fn extend(&mut self, other: NetworkSpec) {
        self.layers.extend(other.layers);
    }

    /// Parses one layer per line as whitespace-separated `key=value` tokens, e.g.
    ///
    /// ```text
    /// kind=conv name=head.cls.0 cin=256 cout=256 k=3 stride=1 pad=1 at=8
    /// kind=linear name=fc in=512 out=10
    /// ```
    ///
    /// Recognised kinds: `conv`, `linear`, `shuffle`, `pool`, `upsample`. `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut spec = NetworkSpec::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let mut fields = std::collections::BTreeMap::new();
            for tok in line.split_whitespace() {
                let (k, v) = tok.split_once('=').ok_or_else(|| {
                    Error::Config(format!("line {}: expected key=value, got {tok:?}", lineno + 1))
                })?;
                fields.insert(k, v);
            }
            let get = |k: &str| -> Result<usize> {
                fields
                    .get(k)
                    .ok_or_else(|| Error::Config(format!("line {}: missing {k}", lineno + 1)))?
                    .parse()
                    .map_err(|_| Error::Config(format!("line {}: {k} is not an integer", lineno + 1)))
            };
            let name = fields.get("name").map(|s| s.to_string()).unwrap_or_else(|| format!("layer{lineno}"));
            let at = if fields.contains_key("at") { get("at")? } else { 1 };
            let kind = match fields.get("kind").copied() {
                Some("conv") => LayerKind::Conv2d {
                    cin: get("cin")?,
                    cout: get("cout")?,
                    kernel: get("k")?,
                    stride: if fields.contains_key("stride") { get("stride")? } else { 1 },
                    pad: if fields.contains_key("pad") { get("pad")? } else { 0 },
                },
                Some("linear") => LayerKind::Linear {
                    inputs: get("in")?,
                    outputs: get("out")?,
                },
                Some("shuffle") => LayerKind::ChannelShuffle,
                Some("pool") => LayerKind::Pool {
                    kernel: get("k")?,
                    stride: get("stride")?,
                },
                Some("upsample") => LayerKind::Upsample,
                Some(other) => {
                    return Err(Error::Config(format!("line {}: unknown layer kind {other:?}", lineno + 1)))
                }
                None => return Err(Error::Config(format!("line {}: missing kind", lineno + 1))),
            };
            spec.push(name, kind, at);
        }
        Ok(spec)
    }
}

/// Spatial size of the feature map at `stride`, produced by repeated stride-2 3x3 convs with
/// padding 1 (each halving rounds up).
pub(crate) fn feature_size(input: (usize, usize), stride: usize) -> Result<(usize, usize)> {
    if stride == 0 || !stride.is_power_of_two() {
        return Err(Error::invalid(format!("feature stride {stride} is not a power of two")));
    }
    let (mut h, mut w) = input;
    let mut s = 1;
    while s < stride {
        h = h.div_ceil(2);
        w = w.div_ceil(2);
        s *= 2;
    }
    Ok((h, w))
}

pub fn count_flops(spec: &NetworkSpec, input_hw: (usize, usize)) -> Result<FlopReport> {
    let mut report = FlopReport::default();
    for layer in &spec.layers {
        let (h, w) = feature_size(input_hw, layer.input_stride)?;
        let flops = match layer.kind {
            LayerKind::Conv2d {
                cin,
                cout,
                kernel,
                stride,
                pad,
            } => {
                if stride == 0 || h + 2 * pad < kernel || w + 2 * pad < kernel {
                    return Err(Error::invalid(format!("layer {}: invalid conv geometry", layer.name)));
                }
                let ho = (h + 2 * pad - kernel) / stride + 1;
                let wo = (w + 2 * pad - kernel) / stride + 1;
                (cout * cin * kernel * kernel * ho * wo) as u64
            }
            LayerKind::Linear { inputs, outputs } => (inputs * outputs) as u64,
            LayerKind::ChannelShuffle | LayerKind::Pool { .. } | LayerKind::Upsample => 0,
        };
        report.layers.push(LayerFlops {
            name: layer.name.clone(),
            flops,
        });
        report.total += flops;
    }
    Ok(report)
}
