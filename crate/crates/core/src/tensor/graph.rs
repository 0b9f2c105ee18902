use super::gemm::gemm;
use super::{check_same_shape, Tensor};
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Minimum(Var, Var),
    Maximum(Var, Var),
    AddScalar(Var),
    MulScalar(Var, f32),
    Relu(Var),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    Sqrt(Var),
    SmoothL1(Var),
    BroadcastTo(Var, Vec<usize>),
    Sum(Var),
    Mean(Var),
    WeightedSum(Var, Vec<f32>),
    Reshape(Var),
    Concat(Vec<Var>, usize),
    Slice {
        input: Var,
        axis: usize,
        start: usize,
    },
    PermuteChannels {
        input: Var,
        perm: Vec<usize>,
    },
    Conv2d {
        input: Var,
        kernel: Var,
        stride: usize,
        pad: usize,
        cols: Vec<f32>,
    },
    AddChannelBias(Var, Var),
    MaxPool2d {
        input: Var,
        argmax: Vec<usize>,
    },
    AvgPool2d {
        input: Var,
        kernel: usize,
        stride: usize,
    },
    Upsample {
        input: Var,
        factor: usize,
    },
    Matmul(Var, Var),
    NchwToRows(Var),
    Softmax(Var),
    LogSoftmax(Var),
    GatherRows {
        input: Var,
        indices: Vec<usize>,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        target: Vec<f32>,
        weights: Vec<f32>,
        temperature: f32,
        probs: Vec<f32>,
    },
    QualityFocal {
        logits: Var,
        target: Vec<f32>,
        beta: f32,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    /// Accumulated gradient; only kept for leaves.
    grad: Option<Tensor>,
    /// Full-precision value for scalar reductions.
    precise: Option<f64>,
}

/// Append-only tape of tensor operations. Nodes are created in topological order, so the
/// backward pass is a single reverse sweep that visits each node once.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    no_grad: bool,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// A graph that never records gradient state (inference only).
    pub fn inference() -> Self {
        Graph {
            nodes: Vec::new(),
            no_grad: true,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        let requires_grad = requires_grad && !self.no_grad;
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            grad: None,
            precise: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Scalar value; reductions report their full-precision accumulator.
    pub fn scalar_f64(&self, v: Var) -> f64 {
        let node = &self.nodes[v.0];
        node.precise.unwrap_or(node.value.data()[0] as f64)
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    /// Clears accumulated leaf gradients. Required between backward calls unless
    /// accumulation is intended.
    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = !self.no_grad && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
            precise: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_scalar(&mut self, value: f64, op: Op, inputs: &[Var]) -> Var {
        let v = self.push(Tensor::scalar(value as f32), op, inputs);
        self.nodes[v.0].precise = Some(value);
        v
    }

    /// Scalar arithmetic on reduced values keeps the double-precision shadow.
    fn carry_precise(&mut self, v: Var, inputs: &[Var], f: impl Fn(&[f64]) -> f64) {
        if self.nodes[v.0].value.numel() != 1 || inputs.iter().all(|i| self.nodes[i.0].precise.is_none()) {
            return;
        }
        let p: Vec<f64> = inputs.iter().map(|i| self.scalar_f64(*i)).collect();
        self.nodes[v.0].precise = Some(f(&p));
    }

    fn binary(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(f32, f32) -> f32) -> Result<Tensor> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        check_same_shape(name, ta.shape(), tb.shape())?;
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| f(*x, *y)).collect();
        Ok(Tensor::new(ta.shape().to_vec(), data).expect("same shape"))
    }

    fn unary(&self, a: Var, f: impl Fn(f32) -> f32) -> Tensor {
        let t = &self.nodes[a.0].value;
        Tensor::new(t.shape().to_vec(), t.data().iter().map(|x| f(*x)).collect()).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary("add", a, b, |x, y| x + y)?;
        let v = self.push(t, Op::Add(a, b), &[a, b]);
        self.carry_precise(v, &[a, b], |p| p[0] + p[1]);
        Ok(v)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary("sub", a, b, |x, y| x - y)?;
        let v = self.push(t, Op::Sub(a, b), &[a, b]);
        self.carry_precise(v, &[a, b], |p| p[0] - p[1]);
        Ok(v)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary("mul", a, b, |x, y| x * y)?;
        let v = self.push(t, Op::Mul(a, b), &[a, b]);
        self.carry_precise(v, &[a, b], |p| p[0] * p[1]);
        Ok(v)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary("div", a, b, |x, y| x / y)?;
        let v = self.push(t, Op::Div(a, b), &[a, b]);
        self.carry_precise(v, &[a, b], |p| p[0] / p[1]);
        Ok(v)
    }

    /// Elementwise minimum; ties route the gradient to `a`.
    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary("minimum", a, b, f32::min)?;
        Ok(self.push(t, Op::Minimum(a, b), &[a, b]))
    }

    /// Elementwise maximum; ties route the gradient to `a`.
    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary("maximum", a, b, f32::max)?;
        Ok(self.push(t, Op::Maximum(a, b), &[a, b]))
    }

    pub fn add_scalar(&mut self, a: Var, c: f32) -> Var {
        let t = self.unary(a, |x| x + c);
        let v = self.push(t, Op::AddScalar(a), &[a]);
        self.carry_precise(v, &[a], |p| p[0] + c as f64);
        v
    }

    pub fn mul_scalar(&mut self, a: Var, c: f32) -> Var {
        let t = self.unary(a, |x| x * c);
        let v = self.push(t, Op::MulScalar(a, c), &[a]);
        self.carry_precise(v, &[a], |p| p[0] * c as f64);
        v
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.mul_scalar(a, -1.0)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let t = self.unary(a, |x| x.max(0.0));
        self.push(t, Op::Relu(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let t = self.unary(a, sigmoid);
        self.push(t, Op::Sigmoid(a), &[a])
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let t = self.unary(a, f32::exp);
        self.push(t, Op::Exp(a), &[a])
    }

    pub fn log(&mut self, a: Var) -> Var {
        let t = self.unary(a, f32::ln);
        self.push(t, Op::Log(a), &[a])
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let t = self.unary(a, f32::sqrt);
        self.push(t, Op::Sqrt(a), &[a])
    }

    /// Elementwise Smooth-L1 (Huber with unit threshold).
    pub fn smooth_l1(&mut self, a: Var) -> Var {
        let t = self.unary(a, crate::distill::smooth_l1);
        self.push(t, Op::SmoothL1(a), &[a])
    }

    /// Numpy-style broadcast of `a` to `shape` (trailing-aligned).
    pub fn broadcast_to(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let src = self.nodes[a.0].value.shape().to_vec();
        let map = broadcast_map(&src, shape)?;
        let data = self.nodes[a.0].value.data();
        let out: Vec<f32> = map.iter().map(|&i| data[i]).collect();
        let t = Tensor::new(shape.to_vec(), out)?;
        Ok(self.push(t, Op::BroadcastTo(a, src), &[a]))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s: f64 = self.nodes[a.0].value.data().iter().map(|x| *x as f64).sum();
        self.push_scalar(s, Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = &self.nodes[a.0].value;
        let n = t.numel().max(1) as f64;
        let s: f64 = t.data().iter().map(|x| *x as f64).sum::<f64>() / n;
        self.push_scalar(s, Op::Mean(a), &[a])
    }

    pub fn weighted_sum(&mut self, a: Var, weights: Vec<f32>) -> Result<Var> {
        let t = &self.nodes[a.0].value;
        if weights.len() != t.numel() {
            return Err(Error::ShapeMismatch {
                op: "weighted_sum",
                lhs: t.shape().to_vec(),
                rhs: vec![weights.len()],
            });
        }
        let s: f64 = t.data().iter().zip(&weights).map(|(x, w)| *x as f64 * *w as f64).sum();
        Ok(self.push_scalar(s, Op::WeightedSum(a, weights), &[a]))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.nodes[a.0].value.clone().reshape(shape)?;
        Ok(self.push(t, Op::Reshape(a), &[a]))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::invalid("concat of zero tensors"))?;
        let base = self.nodes[first.0].value.shape().to_vec();
        if axis >= base.len() {
            return Err(Error::invalid(format!("concat axis {axis} out of range for {base:?}")));
        }
        let mut total = 0;
        for v in inputs {
            let s = self.nodes[v.0].value.shape();
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: base.clone(),
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for v in inputs {
                let t = &self.nodes[v.0].value;
                let chunk = t.shape()[axis] * inner;
                out.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let t = Tensor::new(shape, out)?;
        Ok(self.push(t, Op::Concat(inputs.to_vec(), axis), inputs))
    }

    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.nodes[a.0].value.shape().to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(Error::invalid(format!(
                "slice [{start}, {}) on axis {axis} out of range for {shape:?}",
                start + len
            )));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let data = self.nodes[a.0].value.data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * shape[axis] + start) * inner;
            out.extend_from_slice(&data[base..base + len * inner]);
        }
        let mut new_shape = shape;
        new_shape[axis] = len;
        let t = Tensor::new(new_shape, out)?;
        Ok(self.push(t, Op::Slice { input: a, axis, start }, &[a]))
    }

    /// Splits along `axis` into consecutive pieces of the given sizes.
    pub fn split(&mut self, a: Var, axis: usize, sizes: &[usize]) -> Result<Vec<Var>> {
        let dim = *self
            .shape(a)
            .get(axis)
            .ok_or_else(|| Error::invalid(format!("split axis {axis} out of range")))?;
        if sizes.iter().sum::<usize>() != dim {
            return Err(Error::invalid(format!("split sizes {sizes:?} do not sum to {dim}")));
        }
        let mut start = 0;
        let mut out = Vec::with_capacity(sizes.len());
        for &len in sizes {
            out.push(self.slice(a, axis, start, len)?);
            start += len;
        }
        Ok(out)
    }

    /// Reorders axis 1: output channel `i` is input channel `perm[i]`.
    pub fn permute_channels(&mut self, a: Var, perm: Vec<usize>) -> Result<Var> {
        let t = &self.nodes[a.0].value;
        let shape = t.shape().to_vec();
        if shape.len() < 2 || perm.len() != shape[1] {
            return Err(Error::invalid(format!(
                "permutation of length {} does not match channel axis of {shape:?}",
                perm.len()
            )));
        }
        let mut seen = vec![false; perm.len()];
        for &p in &perm {
            if p >= perm.len() || std::mem::replace(&mut seen[p], true) {
                return Err(Error::invalid(format!("{perm:?} is not a permutation")));
            }
        }
        let c = shape[1];
        let inner: usize = shape[2..].iter().product();
        let data = t.data();
        let mut out = vec![0.0; data.len()];
        for n in 0..shape[0] {
            for (i, &p) in perm.iter().enumerate() {
                let dst = (n * c + i) * inner;
                let src = (n * c + p) * inner;
                out[dst..dst + inner].copy_from_slice(&data[src..src + inner]);
            }
        }
        let t = Tensor::new(shape, out)?;
        Ok(self.push(t, Op::PermuteChannels { input: a, perm }, &[a]))
    }

    /// 2-D convolution, NCHW input and OIHW kernel, symmetric zero padding.
    pub fn conv2d(&mut self, input: Var, kernel: Var, stride: usize, pad: usize) -> Result<Var> {
        let xs = self.nodes[input.0].value.shape().to_vec();
        let ks = self.nodes[kernel.0].value.shape().to_vec();
        if xs.len() != 4 || ks.len() != 4 || xs[1] != ks[1] {
            return Err(Error::ShapeMismatch {
                op: "conv2d (input NCHW vs kernel OIHW)",
                lhs: xs,
                rhs: ks,
            });
        }
        if stride == 0 {
            return Err(Error::invalid("conv2d stride must be >= 1"));
        }
        let geom = ConvGeom::new(&xs, &ks, stride, pad)?;
        let keep_cols = !self.no_grad
            && (self.nodes[input.0].requires_grad || self.nodes[kernel.0].requires_grad)
            && !geom.is_pointwise();
        let x = self.nodes[input.0].value.data();
        let w = self.nodes[kernel.0].value.data();
        let (ckk, hw) = (geom.ckk(), geom.out_hw());
        let mut out = vec![0.0; geom.n * geom.cout * hw];
        let mut cols = if keep_cols { vec![0.0; geom.n * ckk * hw] } else { Vec::new() };
        let mut scratch = if geom.is_pointwise() || keep_cols { Vec::new() } else { vec![0.0; ckk * hw] };
        for n in 0..geom.n {
            let xn = &x[n * geom.cin * geom.h * geom.w..(n + 1) * geom.cin * geom.h * geom.w];
            let col: &[f32] = if geom.is_pointwise() {
                xn
            } else {
                let buf: &mut [f32] = if keep_cols {
                    &mut cols[n * ckk * hw..(n + 1) * ckk * hw]
                } else {
                    &mut scratch
                };
                im2col(xn, &geom, buf);
                buf
            };
            gemm(geom.cout, ckk, hw, w, false, col, false, &mut out[n * geom.cout * hw..(n + 1) * geom.cout * hw], false);
        }
        let t = Tensor::new(vec![geom.n, geom.cout, geom.ho, geom.wo], out)?;
        Ok(self.push(
            t,
            Op::Conv2d {
                input,
                kernel,
                stride,
                pad,
                cols,
            },
            &[input, kernel],
        ))
    }

    /// Adds `bias[c]` along axis 1 of an `N x C x ...` tensor.
    pub fn add_channel_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let t = &self.nodes[a.0].value;
        let b = &self.nodes[bias.0].value;
        if t.ndim() < 2 || b.numel() != t.shape()[1] {
            return Err(Error::ShapeMismatch {
                op: "add_channel_bias",
                lhs: t.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let c = t.shape()[1];
        let inner: usize = t.shape()[2..].iter().product();
        let mut out = t.data().to_vec();
        for (i, chunk) in out.chunks_mut(inner).enumerate() {
            let bv = b.data()[i % c];
            chunk.iter_mut().for_each(|v| *v += bv);
        }
        let t = Tensor::new(t.shape().to_vec(), out)?;
        Ok(self.push(t, Op::AddChannelBias(a, bias), &[a, bias]))
    }

    /// Non-overlapping-or-strided max pooling without padding; ties pick the first maximum.
    pub fn max_pool2d(&mut self, a: Var, kernel: usize, stride: usize) -> Result<Var> {
        let (n, c, h, w, ho, wo) = pool_dims(self.shape(a), kernel, stride)?;
        let data = self.nodes[a.0].value.data();
        let mut out = Vec::with_capacity(n * c * ho * wo);
        let mut argmax = Vec::with_capacity(n * c * ho * wo);
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = f32::NEG_INFINITY;
                    let mut best_i = base;
                    for ky in 0..kernel {
                        for kx in 0..kernel {
                            let i = base + (oy * stride + ky) * w + ox * stride + kx;
                            if data[i] > best {
                                best = data[i];
                                best_i = i;
                            }
                        }
                    }
                    out.push(best);
                    argmax.push(best_i);
                }
            }
        }
        let t = Tensor::new(vec![n, c, ho, wo], out)?;
        Ok(self.push(t, Op::MaxPool2d { input: a, argmax }, &[a]))
    }

    pub fn avg_pool2d(&mut self, a: Var, kernel: usize, stride: usize) -> Result<Var> {
        let (n, c, h, w, ho, wo) = pool_dims(self.shape(a), kernel, stride)?;
        let data = self.nodes[a.0].value.data();
        let norm = 1.0 / (kernel * kernel) as f32;
        let mut out = Vec::with_capacity(n * c * ho * wo);
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut s = 0.0;
                    for ky in 0..kernel {
                        for kx in 0..kernel {
                            s += data[base + (oy * stride + ky) * w + ox * stride + kx];
                        }
                    }
                    out.push(s * norm);
                }
            }
        }
        let t = Tensor::new(vec![n, c, ho, wo], out)?;
        Ok(self.push(t, Op::AvgPool2d { input: a, kernel, stride }, &[a]))
    }

    /// Nearest-neighbour upsampling of an NCHW tensor by an integer factor.
    pub fn upsample_nearest(&mut self, a: Var, factor: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 4 || factor == 0 {
            return Err(Error::invalid(format!("upsample needs NCHW and factor >= 1, got {s:?}")));
        }
        let (h, w) = (s[2], s[3]);
        let (ho, wo) = (h * factor, w * factor);
        let data = self.nodes[a.0].value.data();
        let mut out = Vec::with_capacity(s[0] * s[1] * ho * wo);
        for plane in 0..s[0] * s[1] {
            for oy in 0..ho {
                let row = plane * h * w + (oy / factor) * w;
                for ox in 0..wo {
                    out.push(data[row + ox / factor]);
                }
            }
        }
        let t = Tensor::new(vec![s[0], s[1], ho, wo], out)?;
        Ok(self.push(t, Op::Upsample { input: a, factor }, &[a]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: sa,
                rhs: sb,
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), false, &mut out, false);
        let t = Tensor::new(vec![m, n], out)?;
        Ok(self.push(t, Op::Matmul(a, b), &[a, b]))
    }

    /// Fully connected layer on `rows x in` inputs with an `in x out` weight.
    pub fn linear(&mut self, x: Var, weight: Var, bias: Var) -> Result<Var> {
        let y = self.matmul(x, weight)?;
        self.add_channel_bias(y, bias)
    }

    /// `N x C x H x W` to `(N*H*W) x C`, rows in image-major raster order.
    pub fn nchw_to_rows(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 4 {
            return Err(Error::invalid(format!("nchw_to_rows needs a 4-D tensor, got {s:?}")));
        }
        let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
        let data = self.nodes[a.0].value.data();
        let mut out = vec![0.0; data.len()];
        for b in 0..n {
            for ch in 0..c {
                let src = &data[(b * c + ch) * hw..(b * c + ch + 1) * hw];
                for (p, v) in src.iter().enumerate() {
                    out[(b * hw + p) * c + ch] = *v;
                }
            }
        }
        let t = Tensor::new(vec![n * hw, c], out)?;
        Ok(self.push(t, Op::NchwToRows(a), &[a]))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let t = &self.nodes[a.0].value;
        let k = last_dim(t)?;
        let mut out = t.data().to_vec();
        out.chunks_mut(k).for_each(softmax_in_place);
        let t = Tensor::new(t.shape().to_vec(), out)?;
        Ok(self.push(t, Op::Softmax(a), &[a]))
    }

    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let t = &self.nodes[a.0].value;
        let k = last_dim(t)?;
        let mut out = t.data().to_vec();
        for row in out.chunks_mut(k) {
            let m = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f32>().ln();
            row.iter_mut().for_each(|v| *v -= lse);
        }
        let t = Tensor::new(t.shape().to_vec(), out)?;
        Ok(self.push(t, Op::LogSoftmax(a), &[a]))
    }

    /// Selects rows of a 2-D tensor; duplicate indices are allowed.
    pub fn gather_rows(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 2 {
            return Err(Error::invalid(format!("gather_rows needs a 2-D tensor, got {s:?}")));
        }
        let k = s[1];
        let data = self.nodes[a.0].value.data();
        let mut out = Vec::with_capacity(indices.len() * k);
        for &i in indices {
            if i >= s[0] {
                return Err(Error::invalid(format!("row {i} out of range for {s:?}")));
            }
            out.extend_from_slice(&data[i * k..(i + 1) * k]);
        }
        let t = Tensor::new(vec![indices.len(), k], out)?;
        Ok(self.push(
            t,
            Op::GatherRows {
                input: a,
                indices: indices.to_vec(),
            },
            &[a],
        ))
    }

    /// `sum_r weights[r] * tau^2 * CE(target_r, softmax(logits_r / tau))` over rows of the last axis.
    ///
    /// With `subtract_entropy` the target entropy is removed, giving the weighted KL divergence.
    /// Targets are constants: no gradient flows to them.
    pub fn softmax_cross_entropy(
        &mut self,
        logits: Var,
        target: &Tensor,
        weights: &[f32],
        temperature: f32,
        subtract_entropy: bool,
    ) -> Result<Var> {
        let t = &self.nodes[logits.0].value;
        check_same_shape("softmax_cross_entropy", t.shape(), target.shape())?;
        let k = last_dim(t)?;
        let rows = t.numel() / k;
        if weights.len() != rows {
            return Err(Error::invalid(format!(
                "softmax_cross_entropy: {} weights for {rows} rows",
                weights.len()
            )));
        }
        if !(temperature > 0.0) {
            return Err(Error::invalid("temperature must be positive"));
        }
        let tau = temperature as f64;
        let mut probs = vec![0.0f32; t.numel()];
        let mut total = 0.0f64;
        for r in 0..rows {
            let w = weights[r] as f64;
            let x = &t.data()[r * k..(r + 1) * k];
            let m = x.iter().map(|v| *v as f64 / tau).fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = x.iter().map(|v| (*v as f64 / tau - m).exp()).sum();
            let lse = m + z.ln();
            let p = &target.data()[r * k..(r + 1) * k];
            let mut row = 0.0f64;
            for j in 0..k {
                let logq = x[j] as f64 / tau - lse;
                probs[r * k + j] = logq.exp() as f32;
                let pj = p[j] as f64;
                if pj > 0.0 {
                    row -= pj * logq;
                    if subtract_entropy {
                        row += pj * pj.ln();
                    }
                }
            }
            if subtract_entropy {
                // a rounded target need not sum to one, which can push a vanishing KL below zero
                row = row.max(0.0);
            }
            if w != 0.0 {
                total += w * tau * tau * row;
            }
        }
        Ok(self.push_scalar(
            total,
            Op::SoftmaxCrossEntropy {
                logits,
                target: target.data().to_vec(),
                weights: weights.to_vec(),
                temperature,
                probs,
            },
            &[logits],
        ))
    }

    /// Quality focal loss summed over all elements: `|y - s|^beta * BCE(s, y)`, `s = sigmoid(x)`.
    pub fn quality_focal(&mut self, logits: Var, target: &Tensor, beta: f32) -> Result<Var> {
        let t = &self.nodes[logits.0].value;
        check_same_shape("quality_focal", t.shape(), target.shape())?;
        let mut total = 0.0f64;
        for (x, y) in t.data().iter().zip(target.data()) {
            let (x, y) = (*x as f64, *y as f64);
            let s = sigmoid64(x);
            let bce = y * softplus64(-x) + (1.0 - y) * softplus64(x);
            total += (s - y).abs().powf(beta as f64) * bce;
        }
        Ok(self.push_scalar(
            total,
            Op::QualityFocal {
                logits,
                target: target.data().to_vec(),
                beta,
            },
            &[logits],
        ))
    }

    /// Reverse sweep from a scalar `loss`. Leaf gradients accumulate across calls.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.nodes[loss.0].value.is_scalar() {
            return Err(Error::invalid(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f32>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[i].op {
                let node = &mut self.nodes[i];
                match &mut node.grad {
                    Some(acc) => acc.data_mut().iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    None => node.grad = Some(Tensor::new(node.value.shape().to_vec(), g)?),
                }
                continue;
            }
            self.backprop_node(i, &g, &mut grads);
        }
        Ok(())
    }

    fn backprop_node(&self, i: usize, g: &[f32], grads: &mut [Option<Vec<f32>>]) {
        let node = &self.nodes[i];
        let out = node.value.data();
        let val = |v: Var| self.nodes[v.0].value.data();
        let mut acc = |v: Var, f: &dyn Fn(&mut [f32])| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.numel()]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, &|s| add_into(s, g));
                acc(*b, &|s| add_into(s, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &|s| add_into(s, g));
                acc(*b, &|s| s.iter_mut().zip(g).for_each(|(x, y)| *x -= y));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                acc(*a, &|s| zip3(s, g, vb, |gi, bi| gi * bi));
                acc(*b, &|s| zip3(s, g, va, |gi, ai| gi * ai));
            }
            Op::Div(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                acc(*a, &|s| zip3(s, g, vb, |gi, bi| gi / bi));
                acc(*b, &|s| {
                    for j in 0..s.len() {
                        s[j] -= g[j] * va[j] / (vb[j] * vb[j]);
                    }
                });
            }
            Op::Minimum(a, b) | Op::Maximum(a, b) => {
                let is_min = matches!(node.op, Op::Minimum(..));
                let (va, vb) = (val(*a), val(*b));
                let pick_a = |j: usize| if is_min { va[j] <= vb[j] } else { va[j] >= vb[j] };
                acc(*a, &|s| {
                    for j in 0..s.len() {
                        if pick_a(j) {
                            s[j] += g[j];
                        }
                    }
                });
                acc(*b, &|s| {
                    for j in 0..s.len() {
                        if !pick_a(j) {
                            s[j] += g[j];
                        }
                    }
                });
            }
            Op::AddScalar(a) | Op::Reshape(a) => acc(*a, &|s| add_into(s, g)),
            Op::MulScalar(a, c) => acc(*a, &|s| s.iter_mut().zip(g).for_each(|(x, y)| *x += y * c)),
            Op::Relu(a) => acc(*a, &|s| zip3(s, g, out, |gi, yi| if yi > 0.0 { gi } else { 0.0 })),
            Op::Sigmoid(a) => acc(*a, &|s| zip3(s, g, out, |gi, yi| gi * yi * (1.0 - yi))),
            Op::Exp(a) => acc(*a, &|s| zip3(s, g, out, |gi, yi| gi * yi)),
            Op::Log(a) => {
                let va = val(*a);
                acc(*a, &|s| zip3(s, g, va, |gi, xi| gi / xi));
            }
            Op::Sqrt(a) => acc(*a, &|s| {
                zip3(s, g, out, |gi, yi| if yi > 0.0 { gi / (2.0 * yi) } else { 0.0 })
            }),
            Op::SmoothL1(a) => {
                let va = val(*a);
                acc(*a, &|s| zip3(s, g, va, |gi, xi| gi * xi.clamp(-1.0, 1.0)));
            }
            Op::BroadcastTo(a, src) => {
                let map = broadcast_map(src, node.value.shape()).expect("validated in forward");
                acc(*a, &|s| {
                    for (gi, &j) in g.iter().zip(&map) {
                        s[j] += gi;
                    }
                });
            }
            Op::Sum(a) => acc(*a, &|s| s.iter_mut().for_each(|x| *x += g[0])),
            Op::Mean(a) => {
                let n = self.nodes[a.0].value.numel().max(1) as f32;
                acc(*a, &|s| s.iter_mut().for_each(|x| *x += g[0] / n));
            }
            Op::WeightedSum(a, w) => acc(*a, &|s| s.iter_mut().zip(w).for_each(|(x, wi)| *x += g[0] * wi)),
            Op::Concat(inputs, axis) => {
                let shape = node.value.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let total = shape[*axis] * inner;
                let mut offset = 0;
                for v in inputs {
                    let chunk = self.nodes[v.0].value.shape()[*axis] * inner;
                    acc(*v, &|s| {
                        for o in 0..outer {
                            add_into(&mut s[o * chunk..(o + 1) * chunk], &g[o * total + offset..o * total + offset + chunk]);
                        }
                    });
                    offset += chunk;
                }
            }
            Op::Slice { input, axis, start } => {
                let in_shape = self.nodes[input.0].value.shape();
                let outer: usize = in_shape[..*axis].iter().product();
                let inner: usize = in_shape[axis + 1..].iter().product();
                let len = node.value.shape()[*axis];
                acc(*input, &|s| {
                    for o in 0..outer {
                        let base = (o * in_shape[*axis] + start) * inner;
                        add_into(&mut s[base..base + len * inner], &g[o * len * inner..(o + 1) * len * inner]);
                    }
                });
            }
            Op::PermuteChannels { input, perm } => {
                let shape = node.value.shape();
                let c = shape[1];
                let inner: usize = shape[2..].iter().product();
                acc(*input, &|s| {
                    for n in 0..shape[0] {
                        for (i, &p) in perm.iter().enumerate() {
                            let src = (n * c + i) * inner;
                            let dst = (n * c + p) * inner;
                            add_into(&mut s[dst..dst + inner], &g[src..src + inner]);
                        }
                    }
                });
            }
            Op::Conv2d {
                input,
                kernel,
                stride,
                pad,
                cols,
            } => {
                let xs = self.nodes[input.0].value.shape();
                let ks = self.nodes[kernel.0].value.shape();
                let geom = ConvGeom::new(xs, ks, *stride, *pad).expect("validated in forward");
                let (ckk, hw) = (geom.ckk(), geom.out_hw());
                let x = val(*input);
                let w = val(*kernel);
                let in_plane = geom.cin * geom.h * geom.w;
                let col_of = |n: usize| -> &[f32] {
                    if geom.is_pointwise() {
                        &x[n * in_plane..(n + 1) * in_plane]
                    } else {
                        &cols[n * ckk * hw..(n + 1) * ckk * hw]
                    }
                };
                acc(*kernel, &|s| {
                    for n in 0..geom.n {
                        let gy = &g[n * geom.cout * hw..(n + 1) * geom.cout * hw];
                        gemm(geom.cout, hw, ckk, gy, false, col_of(n), true, s, true);
                    }
                });
                acc(*input, &|s| {
                    let mut dcol = vec![0.0; ckk * hw];
                    for n in 0..geom.n {
                        let gy = &g[n * geom.cout * hw..(n + 1) * geom.cout * hw];
                        let dx = &mut s[n * in_plane..(n + 1) * in_plane];
                        if geom.is_pointwise() {
                            gemm(ckk, geom.cout, hw, w, true, gy, false, dx, true);
                        } else {
                            gemm(ckk, geom.cout, hw, w, true, gy, false, &mut dcol, false);
                            col2im_add(&dcol, &geom, dx);
                        }
                    }
                });
            }
            Op::AddChannelBias(a, b) => {
                let shape = node.value.shape();
                let c = shape[1];
                let inner: usize = shape[2..].iter().product();
                acc(*a, &|s| add_into(s, g));
                acc(*b, &|s| {
                    for (k, chunk) in g.chunks(inner).enumerate() {
                        s[k % c] += chunk.iter().sum::<f32>();
                    }
                });
            }
            Op::MaxPool2d { input, argmax } => acc(*input, &|s| {
                for (gi, &j) in g.iter().zip(argmax) {
                    s[j] += gi;
                }
            }),
            Op::AvgPool2d { input, kernel, stride } => {
                let in_shape = self.nodes[input.0].value.shape();
                let (h, w) = (in_shape[2], in_shape[3]);
                let (ho, wo) = (node.value.shape()[2], node.value.shape()[3]);
                let norm = 1.0 / (kernel * kernel) as f32;
                acc(*input, &|s| {
                    for plane in 0..in_shape[0] * in_shape[1] {
                        for oy in 0..ho {
                            for ox in 0..wo {
                                let gi = g[(plane * ho + oy) * wo + ox] * norm;
                                for ky in 0..*kernel {
                                    for kx in 0..*kernel {
                                        s[plane * h * w + (oy * stride + ky) * w + ox * stride + kx] += gi;
                                    }
                                }
                            }
                        }
                    }
                });
            }
            Op::Upsample { input, factor } => {
                let in_shape = self.nodes[input.0].value.shape();
                let (h, w) = (in_shape[2], in_shape[3]);
                let (ho, wo) = (h * factor, w * factor);
                acc(*input, &|s| {
                    for plane in 0..in_shape[0] * in_shape[1] {
                        for oy in 0..ho {
                            for ox in 0..wo {
                                s[plane * h * w + (oy / factor) * w + ox / factor] += g[(plane * ho + oy) * wo + ox];
                            }
                        }
                    }
                });
            }
            Op::Matmul(a, b) => {
                let (sa, sb) = (self.nodes[a.0].value.shape(), self.nodes[b.0].value.shape());
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let (va, vb) = (val(*a), val(*b));
                acc(*a, &|s| gemm(m, n, k, g, false, vb, true, s, true));
                acc(*b, &|s| gemm(k, m, n, va, true, g, false, s, true));
            }
            Op::NchwToRows(a) => {
                let s4 = self.nodes[a.0].value.shape();
                let (n, c, hw) = (s4[0], s4[1], s4[2] * s4[3]);
                acc(*a, &|s| {
                    for b in 0..n {
                        for ch in 0..c {
                            let dst = &mut s[(b * c + ch) * hw..(b * c + ch + 1) * hw];
                            for (p, d) in dst.iter_mut().enumerate() {
                                *d += g[(b * hw + p) * c + ch];
                            }
                        }
                    }
                });
            }
            Op::Softmax(a) => {
                let k = *node.value.shape().last().unwrap_or(&1);
                acc(*a, &|s| {
                    for ((sr, gr), yr) in s.chunks_mut(k).zip(g.chunks(k)).zip(out.chunks(k)) {
                        let dot: f32 = gr.iter().zip(yr).map(|(x, y)| x * y).sum();
                        for j in 0..k {
                            sr[j] += yr[j] * (gr[j] - dot);
                        }
                    }
                });
            }
            Op::LogSoftmax(a) => {
                let k = *node.value.shape().last().unwrap_or(&1);
                acc(*a, &|s| {
                    for ((sr, gr), yr) in s.chunks_mut(k).zip(g.chunks(k)).zip(out.chunks(k)) {
                        let total: f32 = gr.iter().sum();
                        for j in 0..k {
                            sr[j] += gr[j] - yr[j].exp() * total;
                        }
                    }
                });
            }
            Op::GatherRows { input, indices } => {
                let k = node.value.shape()[1];
                acc(*input, &|s| {
                    for (r, &i) in indices.iter().enumerate() {
                        add_into(&mut s[i * k..(i + 1) * k], &g[r * k..(r + 1) * k]);
                    }
                });
            }
            Op::SoftmaxCrossEntropy {
                logits,
                target,
                weights,
                temperature,
                probs,
            } => {
                let k = *self.nodes[logits.0].value.shape().last().unwrap_or(&1);
                acc(*logits, &|s| {
                    for (r, w) in weights.iter().enumerate() {
                        if *w == 0.0 {
                            continue;
                        }
                        let p = &target[r * k..(r + 1) * k];
                        let q = &probs[r * k..(r + 1) * k];
                        let mass: f32 = p.iter().sum();
                        let scale = g[0] * w * temperature;
                        for j in 0..k {
                            s[r * k + j] += scale * (q[j] * mass - p[j]);
                        }
                    }
                });
            }
            Op::QualityFocal { logits, target, beta } => {
                let x = val(*logits);
                let beta = *beta as f64;
                acc(*logits, &|s| {
                    for j in 0..s.len() {
                        let (xi, yi) = (x[j] as f64, target[j] as f64);
                        let sg = sigmoid64(xi);
                        let diff = sg - yi;
                        let ad = diff.abs();
                        let bce = yi * softplus64(-xi) + (1.0 - yi) * softplus64(xi);
                        let d_mod = if ad > 0.0 { beta * ad.powf(beta - 1.0) * diff.signum() } else { 0.0 };
                        let d = d_mod * sg * (1.0 - sg) * bce + ad.powf(beta) * diff;
                        s[j] += (g[0] as f64 * d) as f32;
                    }
                });
            }
        }
    }
}

fn add_into(dst: &mut [f32], src: &[f32]) {
    dst.iter_mut().zip(src).for_each(|(a, b)| *a += b);
}

fn zip3(dst: &mut [f32], g: &[f32], other: &[f32], f: impl Fn(f32, f32) -> f32) {
    for j in 0..dst.len() {
        dst[j] += f(g[j], other[j]);
    }
}

pub fn sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn sigmoid64(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus64(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn softmax_in_place(row: &mut [f32]) {
    let m = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    let mut z = 0.0;
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        z += *v;
    }
    row.iter_mut().for_each(|v| *v /= z);
}

fn last_dim(t: &Tensor) -> Result<usize> {
    match t.shape().last() {
        Some(&k) if k > 0 => Ok(k),
        _ => Err(Error::invalid(format!("need a non-empty last axis, got {:?}", t.shape()))),
    }
}

/// For each element of `dst` (row-major), the flat index into a tensor of shape `src`.
fn broadcast_map(src: &[usize], dst: &[usize]) -> Result<Vec<usize>> {
    if src.len() > dst.len() {
        return Err(Error::ShapeMismatch {
            op: "broadcast_to",
            lhs: src.to_vec(),
            rhs: dst.to_vec(),
        });
    }
    let pad = dst.len() - src.len();
    let mut strides = vec![0usize; dst.len()];
    let mut stride = 1;
    for i in (0..src.len()).rev() {
        let (s, d) = (src[i], dst[i + pad]);
        if s != d && s != 1 {
            return Err(Error::ShapeMismatch {
                op: "broadcast_to",
                lhs: src.to_vec(),
                rhs: dst.to_vec(),
            });
        }
        strides[i + pad] = if s == 1 { 0 } else { stride };
        stride *= s;
    }
    let numel: usize = dst.iter().product();
    let mut map = Vec::with_capacity(numel);
    let mut idx = vec![0usize; dst.len()];
    for _ in 0..numel {
        map.push(idx.iter().zip(&strides).map(|(i, s)| i * s).sum());
        for d in (0..dst.len()).rev() {
            idx[d] += 1;
            if idx[d] < dst[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    Ok(map)
}

fn pool_dims(s: &[usize], kernel: usize, stride: usize) -> Result<(usize, usize, usize, usize, usize, usize)> {
    if s.len() != 4 || kernel == 0 || stride == 0 || s[2] < kernel || s[3] < kernel {
        return Err(Error::invalid(format!("pooling k={kernel} s={stride} invalid for {s:?}")));
    }
    Ok((s[0], s[1], s[2], s[3], (s[2] - kernel) / stride + 1, (s[3] - kernel) / stride + 1))
}

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn new(xs: &[usize], ks: &[usize], stride: usize, pad: usize) -> Result<Self> {
        let (h, w, kh, kw) = (xs[2], xs[3], ks[2], ks[3]);
        if h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(Error::ShapeMismatch {
                op: "conv2d (kernel larger than padded input)",
                lhs: xs.to_vec(),
                rhs: ks.to_vec(),
            });
        }
        Ok(ConvGeom {
            n: xs[0],
            cin: xs[1],
            h,
            w,
            cout: ks[0],
            kh,
            kw,
            stride,
            pad,
            ho: (h + 2 * pad - kh) / stride + 1,
            wo: (w + 2 * pad - kw) / stride + 1,
        })
    }

    fn ckk(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn out_hw(&self) -> usize {
        self.ho * self.wo
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
}

fn im2col(x: &[f32], g: &ConvGeom, col: &mut [f32]) {
    let hw = g.out_hw();
    for c in 0..g.cin {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut col[row * hw..(row + 1) * hw];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &x[(c * g.h + iy as usize) * g.w..(c * g.h + iy as usize + 1) * g.w];
                    for (ox, d) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        *d = if ix >= 0 && ix < g.w as isize { src[ix as usize] } else { 0.0 };
                    }
                }
            }
        }
    }
}

fn col2im_add(col: &[f32], g: &ConvGeom, dx: &mut [f32]) {
    let hw = g.out_hw();
    for c in 0..g.cin {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &col[row * hw..(row + 1) * hw];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let base = (c * g.h + iy as usize) * g.w;
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dx[base + ix as usize] += src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}
