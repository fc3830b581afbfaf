use std::sync::Arc;

use crate::linalg;
use crate::{AdError, Result, Tensor};

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Scale(usize, f64),
    Offset(usize),
    MatMul(usize, usize),
    Conv2d { input: usize, kernel: Arc<Tensor>, stride: usize },
    Depthwise { input: usize, kernel: Arc<Tensor>, stride: usize },
    LeakyRelu(usize, f64),
    Sigmoid(usize),
    Tanh(usize),
    Sin(usize),
    Cos(usize),
    Sqrt(usize),
    Exp(usize),
    Ln(usize),
    PowF(usize, f64),
    Huber(usize, f64),
    Sum(usize),
    Mean(usize),
    L2Norm(usize),
    Concat(Vec<usize>),
    Reshape(usize),
    Gather(usize, Arc<Vec<usize>>),
    Downsample2x(usize),
    ClampMin(usize, f64),
    Clamp(usize, f64, f64),
    LogSoftmax(usize),
    LogdetPsd(usize, Tensor),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Tensor>,
}

/// Define-by-run computation tape.
///
/// Nodes are appended in evaluation order, so the node list is already a
/// topological order and backward is a single reverse sweep.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn binary_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<Vec<usize>> {
    if a.shape() == b.shape() || b.numel() == 1 {
        Ok(a.shape().to_vec())
    } else if a.numel() == 1 {
        Ok(b.shape().to_vec())
    } else {
        Err(AdError::ShapeMismatch { op, lhs: a.shape().to_vec(), rhs: b.shape().to_vec() })
    }
}

#[inline]
fn at(t: &Tensor, k: usize) -> f64 {
    if t.numel() == 1 {
        t.data()[0]
    } else {
        t.data()[k]
    }
}

/// Reduces an output-shaped gradient onto an operand that may have been a
/// broadcast scalar.
fn reduce_to(input: &Tensor, g: Vec<f64>) -> Vec<f64> {
    if input.numel() == 1 && g.len() != 1 {
        vec![g.iter().sum()]
    } else {
        g
    }
}

fn sample_offsets(len: usize, out_len: usize, stride: usize, taps: usize) -> Vec<usize> {
    // Clamp-to-edge "same" padding: output position o reads input o*stride + k - taps/2.
    let half = (taps / 2) as isize;
    let mut idx = Vec::with_capacity(out_len * taps);
    for o in 0..out_len {
        for k in 0..taps {
            let p = (o * stride) as isize + k as isize - half;
            idx.push(p.clamp(0, len as isize - 1) as usize);
        }
    }
    idx
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Leaf that receives gradients.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, true)
    }

    /// Leaf that never receives gradients.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, false)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.constant(Tensor::scalar(value))
    }

    fn push_leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad, grad: None });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, name: &'static str, value: Tensor, op: Op, inputs: &[usize]) -> Result<Var> {
        if !value.is_finite() {
            return Err(AdError::NonFinite { op: name });
        }
        let requires_grad = inputs.iter().any(|&i| self.nodes[i].requires_grad);
        self.nodes.push(Node { value, op, requires_grad, grad: None });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn item(&self, v: Var) -> Result<f64> {
        self.nodes[v.0].value.item()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, if backward has reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    /// Gradient of a leaf, or zeros when it did not influence the root.
    pub fn grad_or_zeros(&self, v: Var) -> Tensor {
        self.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(self.shape(v).to_vec()))
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    // ---- elementwise binary ----

    fn binary(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let shape = binary_shape(name, ta, tb)?;
        let n: usize = shape.iter().product();
        let data = (0..n).map(|k| f(at(ta, k), at(tb, k))).collect();
        let out = Tensor::new(shape, data)?;
        self.push(name, out, op, &[a.0, b.0])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a.0, b.0))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a.0, b.0))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a.0, b.0))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, |x, y| x / y, Op::Div(a.0, b.0))
    }

    // ---- elementwise unary ----

    fn unary(&mut self, name: &'static str, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let out = self.nodes[a.0].value.map(f);
        self.push(name, out, op, &[a.0])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary("scale", a, |x| c * x, Op::Scale(a.0, c))
    }

    pub fn offset(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary("offset", a, |x| x + c, Op::Offset(a.0))
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.scale(a, -1.0)
    }

    pub fn leaky_relu(&mut self, a: Var, alpha: f64) -> Result<Var> {
        self.unary("leaky_relu", a, |x| if x > 0.0 { x } else { alpha * x }, Op::LeakyRelu(a.0, alpha))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.leaky_relu(a, 0.0)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(
            "sigmoid",
            a,
            |x| {
                if x >= 0.0 {
                    1.0 / (1.0 + (-x).exp())
                } else {
                    let e = x.exp();
                    e / (1.0 + e)
                }
            },
            Op::Sigmoid(a.0),
        )
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary("tanh", a, f64::tanh, Op::Tanh(a.0))
    }

    pub fn sin(&mut self, a: Var) -> Result<Var> {
        self.unary("sin", a, f64::sin, Op::Sin(a.0))
    }

    pub fn cos(&mut self, a: Var) -> Result<Var> {
        self.unary("cos", a, f64::cos, Op::Cos(a.0))
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        self.unary("sqrt", a, f64::sqrt, Op::Sqrt(a.0))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary("exp", a, f64::exp, Op::Exp(a.0))
    }

    pub fn ln(&mut self, a: Var) -> Result<Var> {
        self.unary("ln", a, f64::ln, Op::Ln(a.0))
    }

    /// `x^p`; inputs must be nonnegative unless `p` is an integer.
    pub fn powf(&mut self, a: Var, p: f64) -> Result<Var> {
        self.unary("powf", a, |x| x.powf(p), Op::PowF(a.0, p))
    }

    /// Elementwise Huber function: quadratic inside `delta`, linear outside.
    pub fn huber(&mut self, a: Var, delta: f64) -> Result<Var> {
        if delta <= 0.0 {
            return Err(AdError::Invalid { op: "huber", msg: format!("delta must be > 0, got {delta}") });
        }
        self.unary(
            "huber",
            a,
            |x| {
                let ax = x.abs();
                if ax <= delta {
                    0.5 * x * x
                } else {
                    delta * (ax - 0.5 * delta)
                }
            },
            Op::Huber(a.0, delta),
        )
    }

    pub fn clamp_min(&mut self, a: Var, lo: f64) -> Result<Var> {
        self.unary("clamp_min", a, |x| x.max(lo), Op::ClampMin(a.0, lo))
    }

    /// Clamp to `[lo, hi]` with pass-through gradient inside the interval.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        self.unary("clamp", a, |x| x.clamp(lo, hi), Op::Clamp(a.0, lo, hi))
    }

    // ---- reductions ----

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.nodes[a.0].value.data().iter().sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(a.0), &[a.0])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = &self.nodes[a.0].value;
        let m = t.data().iter().sum::<f64>() / t.numel() as f64;
        self.push("mean", Tensor::scalar(m), Op::Mean(a.0), &[a.0])
    }

    pub fn l2_norm(&mut self, a: Var) -> Result<Var> {
        let n = self.nodes[a.0].value.l2_norm();
        self.push("l2_norm", Tensor::scalar(n), Op::L2Norm(a.0), &[a.0])
    }

    // ---- structural ----

    pub fn reshape(&mut self, a: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let out = self.nodes[a.0].value.clone().reshaped(shape)?;
        self.push("reshape", out, Op::Reshape(a.0), &[a.0])
    }

    /// Concatenates along the leading axis; trailing dims must agree.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| AdError::Invalid { op: "concat", msg: "no inputs".into() })?;
        let tail = self.nodes[first.0].value.shape()[1..].to_vec();
        let mut lead = 0;
        let mut data = Vec::new();
        for p in parts {
            let t = &self.nodes[p.0].value;
            if t.shape()[1..] != tail[..] {
                return Err(AdError::ShapeMismatch {
                    op: "concat",
                    lhs: self.nodes[first.0].value.shape().to_vec(),
                    rhs: t.shape().to_vec(),
                });
            }
            lead += t.shape()[0];
            data.extend_from_slice(t.data());
        }
        let mut shape = vec![lead];
        shape.extend(tail);
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        let out = Tensor::new(shape, data)?;
        self.push("concat", out, Op::Concat(ids.clone()), &ids)
    }

    /// `out[k] = a[indices[k]]` over flat storage, reshaped to `shape`.
    pub fn gather(&mut self, a: Var, indices: Arc<Vec<usize>>, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let t = &self.nodes[a.0].value;
        if let Some(&bad) = indices.iter().find(|&&i| i >= t.numel()) {
            return Err(AdError::IndexOutOfRange { op: "gather", index: bad, len: t.numel() });
        }
        let data = indices.iter().map(|&i| t.data()[i]).collect();
        let out = Tensor::new(shape, data)?;
        self.push("gather", out, Op::Gather(a.0, indices), &[a.0])
    }

    /// Contiguous flat slice `[start, start+len)` as a 1-D tensor.
    pub fn slice(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let idx: Vec<usize> = (start..start + len).collect();
        self.gather(a, Arc::new(idx), [len])
    }

    /// Single element as a scalar.
    pub fn select(&mut self, a: Var, index: usize) -> Result<Var> {
        self.gather(a, Arc::new(vec![index]), [1])
    }

    /// Row `i` of a 2-D tensor, as a 1-D tensor.
    pub fn row(&mut self, a: Var, i: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if shape.len() != 2 || i >= shape[0] {
            return Err(AdError::IndexOutOfRange { op: "row", index: i, len: shape.first().copied().unwrap_or(0) });
        }
        self.slice(a, i * shape[1], shape[1])
    }

    /// Repeats a tensor whose leading dim is 1 `times` along the leading axis.
    pub fn repeat(&mut self, a: Var, times: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if shape.first() != Some(&1) {
            return Err(AdError::Invalid { op: "repeat", msg: format!("leading dim must be 1, got {shape:?}") });
        }
        let n: usize = shape.iter().product();
        let idx: Vec<usize> = (0..times).flat_map(|_| 0..n).collect();
        let mut out_shape = shape;
        out_shape[0] = times;
        self.gather(a, Arc::new(idx), out_shape)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if shape.len() != 2 {
            return Err(AdError::Invalid { op: "transpose", msg: format!("expected 2-D, got {shape:?}") });
        }
        let (r, c) = (shape[0], shape[1]);
        let idx: Vec<usize> = (0..c).flat_map(|j| (0..r).map(move |i| i * c + j)).collect();
        self.gather(a, Arc::new(idx), [c, r])
    }

    // ---- linear algebra ----

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (sa, sb) = (ta.shape(), tb.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(AdError::ShapeMismatch { op: "matmul", lhs: sa.to_vec(), rhs: sb.to_vec() });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = Tensor::new([m, n], linalg::matmul(ta.data(), tb.data(), m, k, n))?;
        self.push("matmul", out, Op::MatMul(a.0, b.0), &[a.0, b.0])
    }

    /// `log det` of a symmetric positive-definite matrix via Cholesky.
    pub fn logdet_psd(&mut self, a: Var) -> Result<Var> {
        let t = &self.nodes[a.0].value;
        let s = t.shape();
        if s.len() != 2 || s[0] != s[1] {
            return Err(AdError::ShapeMismatch { op: "logdet_psd", lhs: s.to_vec(), rhs: vec![s[0], s[0]] });
        }
        let n = s[0];
        let d = t.data();
        for i in 0..n {
            for j in 0..i {
                let (x, y) = (d[i * n + j], d[j * n + i]);
                if (x - y).abs() > 1e-9 * (1.0 + x.abs().max(y.abs())) {
                    return Err(AdError::Invalid {
                        op: "logdet_psd",
                        msg: format!("matrix not symmetric at ({i},{j}): {x} vs {y}"),
                    });
                }
            }
        }
        let sym: Vec<f64> = (0..n * n).map(|k| 0.5 * (d[k] + d[(k % n) * n + k / n])).collect();
        let chol = linalg::cholesky(&sym, n).ok_or(AdError::DegenerateGram)?;
        let logdet = 2.0 * (0..n).map(|i| chol[i * n + i].ln()).sum::<f64>();
        let inv = Tensor::new([n, n], linalg::cholesky_inverse(&chol, n))?;
        self.push("logdet_psd", Tensor::scalar(logdet), Op::LogdetPsd(a.0, inv), &[a.0])
    }

    /// Log-softmax over all elements of a 1-D tensor.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let t = &self.nodes[a.0].value;
        let max = t.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + t.data().iter().map(|x| (x - max).exp()).sum::<f64>().ln();
        let out = t.map(|x| x - lse);
        self.push("log_softmax", out, Op::LogSoftmax(a.0), &[a.0])
    }

    // ---- image ops, layout [C, H, W] ----

    /// Convolution with a constant kernel `[c_out, c_in, kh, kw]`, clamp-to-edge
    /// padding, output size `ceil(H/stride) x ceil(W/stride)`.
    pub fn conv2d_fixed(&mut self, input: Var, kernel: Arc<Tensor>, stride: usize) -> Result<Var> {
        let t = &self.nodes[input.0].value;
        let (s, ks) = (t.shape(), kernel.shape());
        if s.len() != 3 || ks.len() != 4 || ks[1] != s[0] || stride == 0 {
            return Err(AdError::ShapeMismatch { op: "conv2d_fixed", lhs: s.to_vec(), rhs: ks.to_vec() });
        }
        let (cin, h, w) = (s[0], s[1], s[2]);
        let (cout, kh, kw) = (ks[0], ks[2], ks[3]);
        let (ho, wo) = (h.div_ceil(stride), w.div_ceil(stride));
        let ys = sample_offsets(h, ho, stride, kh);
        let xs = sample_offsets(w, wo, stride, kw);
        let (x, k) = (t.data(), kernel.data());
        let mut out = vec![0.0; cout * ho * wo];
        for co in 0..cout {
            for ci in 0..cin {
                let plane = &x[ci * h * w..(ci + 1) * h * w];
                let kern = &k[(co * cin + ci) * kh * kw..(co * cin + ci + 1) * kh * kw];
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = 0.0;
                        for ky in 0..kh {
                            let row = ys[oy * kh + ky] * w;
                            for kx in 0..kw {
                                acc += kern[ky * kw + kx] * plane[row + xs[ox * kw + kx]];
                            }
                        }
                        out[(co * ho + oy) * wo + ox] += acc;
                    }
                }
            }
        }
        let out = Tensor::new([cout, ho, wo], out)?;
        self.push("conv2d_fixed", out, Op::Conv2d { input: input.0, kernel, stride }, &[input.0])
    }

    /// Per-channel convolution with one constant `[kh, kw]` kernel.
    pub fn depthwise_fixed(&mut self, input: Var, kernel: Arc<Tensor>, stride: usize) -> Result<Var> {
        let t = &self.nodes[input.0].value;
        let (s, ks) = (t.shape(), kernel.shape());
        if s.len() != 3 || ks.len() != 2 || stride == 0 {
            return Err(AdError::ShapeMismatch { op: "depthwise_fixed", lhs: s.to_vec(), rhs: ks.to_vec() });
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let (kh, kw) = (ks[0], ks[1]);
        let (ho, wo) = (h.div_ceil(stride), w.div_ceil(stride));
        let ys = sample_offsets(h, ho, stride, kh);
        let xs = sample_offsets(w, wo, stride, kw);
        let (x, k) = (t.data(), kernel.data());
        let mut out = vec![0.0; c * ho * wo];
        for ch in 0..c {
            let plane = &x[ch * h * w..(ch + 1) * h * w];
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = 0.0;
                    for ky in 0..kh {
                        let row = ys[oy * kh + ky] * w;
                        for kx in 0..kw {
                            acc += k[ky * kw + kx] * plane[row + xs[ox * kw + kx]];
                        }
                    }
                    out[(ch * ho + oy) * wo + ox] = acc;
                }
            }
        }
        let out = Tensor::new([c, ho, wo], out)?;
        self.push("depthwise_fixed", out, Op::Depthwise { input: input.0, kernel, stride }, &[input.0])
    }

    /// 2x2 average pooling; spatial dims must be even.
    pub fn downsample2x(&mut self, input: Var) -> Result<Var> {
        let t = &self.nodes[input.0].value;
        let s = t.shape();
        if s.len() != 3 || !s[1].is_multiple_of(2) || !s[2].is_multiple_of(2) {
            return Err(AdError::Invalid { op: "downsample2x", msg: format!("need [C, even H, even W], got {s:?}") });
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let (ho, wo) = (h / 2, w / 2);
        let x = t.data();
        let mut out = Vec::with_capacity(c * ho * wo);
        for ch in 0..c {
            for oy in 0..ho {
                for ox in 0..wo {
                    let base = ch * h * w + 2 * oy * w + 2 * ox;
                    out.push(0.25 * (x[base] + x[base + 1] + x[base + w] + x[base + w + 1]));
                }
            }
        }
        let out = Tensor::new([c, ho, wo], out)?;
        self.push("downsample2x", out, Op::Downsample2x(input.0), &[input.0])
    }

    // ---- composites ----

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.mul(a, a)
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let p = self.mul(a, b)?;
        self.sum(p)
    }

    // ---- backward ----

    /// Reverse sweep from a scalar root. Leaf gradients accumulate across calls
    /// until [`Graph::zero_grad`].
    pub fn backward(&mut self, root: Var) -> Result<()> {
        let rv = &self.nodes[root.0].value;
        if rv.numel() != 1 {
            return Err(AdError::NonScalarRoot(rv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root.0 + 1];
        grads[root.0] = Some(vec![1.0]);
        let nodes = &self.nodes;

        let acc = |grads: &mut Vec<Option<Vec<f64>>>, id: usize, delta: Vec<f64>| {
            if !nodes[id].requires_grad {
                return;
            }
            match &mut grads[id] {
                Some(g) => g.iter_mut().zip(delta).for_each(|(a, d)| *a += d),
                slot @ None => *slot = Some(delta),
            }
        };

        let mut leaf_grads: Vec<(usize, Vec<f64>)> = Vec::new();
        for id in (0..=root.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let out = &node.value;
            let val = |i: usize| &nodes[i].value;
            match &node.op {
                Op::Leaf => leaf_grads.push((id, g)),
                Op::Add(a, b) => {
                    acc(&mut grads, *a, reduce_to(val(*a), g.clone()));
                    acc(&mut grads, *b, reduce_to(val(*b), g));
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, *a, reduce_to(val(*a), g.clone()));
                    acc(&mut grads, *b, reduce_to(val(*b), g.iter().map(|x| -x).collect()));
                }
                Op::Mul(a, b) => {
                    let (ta, tb) = (val(*a), val(*b));
                    let ga = g.iter().enumerate().map(|(k, gk)| gk * at(tb, k)).collect();
                    let gb = g.iter().enumerate().map(|(k, gk)| gk * at(ta, k)).collect();
                    acc(&mut grads, *a, reduce_to(ta, ga));
                    acc(&mut grads, *b, reduce_to(tb, gb));
                }
                Op::Div(a, b) => {
                    let (ta, tb) = (val(*a), val(*b));
                    let ga = g.iter().enumerate().map(|(k, gk)| gk / at(tb, k)).collect();
                    let gb = g
                        .iter()
                        .enumerate()
                        .map(|(k, gk)| {
                            let d = at(tb, k);
                            -gk * at(ta, k) / (d * d)
                        })
                        .collect();
                    acc(&mut grads, *a, reduce_to(ta, ga));
                    acc(&mut grads, *b, reduce_to(tb, gb));
                }
                Op::Scale(a, c) => acc(&mut grads, *a, g.iter().map(|x| c * x).collect()),
                Op::Offset(a) | Op::Reshape(a) => acc(&mut grads, *a, g),
                Op::MatMul(a, b) => {
                    let (ta, tb) = (val(*a), val(*b));
                    let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                    if nodes[*a].requires_grad {
                        acc(&mut grads, *a, linalg::matmul_bt(&g, tb.data(), m, n, k));
                    }
                    if nodes[*b].requires_grad {
                        acc(&mut grads, *b, linalg::matmul_at(ta.data(), &g, m, k, n));
                    }
                }
                Op::Conv2d { input, kernel, stride } => {
                    let s = val(*input).shape();
                    let (cin, h, w) = (s[0], s[1], s[2]);
                    let ks = kernel.shape();
                    let (cout, kh, kw) = (ks[0], ks[2], ks[3]);
                    let (ho, wo) = (out.shape()[1], out.shape()[2]);
                    let ys = sample_offsets(h, ho, *stride, kh);
                    let xs = sample_offsets(w, wo, *stride, kw);
                    let k = kernel.data();
                    let mut gi = vec![0.0; cin * h * w];
                    for co in 0..cout {
                        for ci in 0..cin {
                            let kern = &k[(co * cin + ci) * kh * kw..(co * cin + ci + 1) * kh * kw];
                            let plane = &mut gi[ci * h * w..(ci + 1) * h * w];
                            for oy in 0..ho {
                                for ox in 0..wo {
                                    let go = g[(co * ho + oy) * wo + ox];
                                    if go == 0.0 {
                                        continue;
                                    }
                                    for ky in 0..kh {
                                        let row = ys[oy * kh + ky] * w;
                                        for kx in 0..kw {
                                            plane[row + xs[ox * kw + kx]] += go * kern[ky * kw + kx];
                                        }
                                    }
                                }
                            }
                        }
                    }
                    acc(&mut grads, *input, gi);
                }
                Op::Depthwise { input, kernel, stride } => {
                    let s = val(*input).shape();
                    let (c, h, w) = (s[0], s[1], s[2]);
                    let (kh, kw) = (kernel.shape()[0], kernel.shape()[1]);
                    let (ho, wo) = (out.shape()[1], out.shape()[2]);
                    let ys = sample_offsets(h, ho, *stride, kh);
                    let xs = sample_offsets(w, wo, *stride, kw);
                    let k = kernel.data();
                    let mut gi = vec![0.0; c * h * w];
                    for ch in 0..c {
                        let plane = &mut gi[ch * h * w..(ch + 1) * h * w];
                        for oy in 0..ho {
                            for ox in 0..wo {
                                let go = g[(ch * ho + oy) * wo + ox];
                                for ky in 0..kh {
                                    let row = ys[oy * kh + ky] * w;
                                    for kx in 0..kw {
                                        plane[row + xs[ox * kw + kx]] += go * k[ky * kw + kx];
                                    }
                                }
                            }
                        }
                    }
                    acc(&mut grads, *input, gi);
                }
                Op::LeakyRelu(a, alpha) => {
                    let x = val(*a).data();
                    let d = g.iter().zip(x).map(|(gk, &xk)| if xk > 0.0 { *gk } else { alpha * gk }).collect();
                    acc(&mut grads, *a, d);
                }
                Op::Sigmoid(a) => {
                    let d = g.iter().zip(out.data()).map(|(gk, &y)| gk * y * (1.0 - y)).collect();
                    acc(&mut grads, *a, d);
                }
                Op::Tanh(a) => {
                    let d = g.iter().zip(out.data()).map(|(gk, &y)| gk * (1.0 - y * y)).collect();
                    acc(&mut grads, *a, d);
                }
                Op::Sin(a) => {
                    let d = g.iter().zip(val(*a).data()).map(|(gk, x)| gk * x.cos()).collect();
                    acc(&mut grads, *a, d);
                }
                Op::Cos(a) => {
                    let d = g.iter().zip(val(*a).data()).map(|(gk, x)| -gk * x.sin()).collect();
                    acc(&mut grads, *a, d);
                }
                Op::Sqrt(a) => {
                    let d = g.iter().zip(out.data()).map(|(gk, &y)| if y > 0.0 { gk * 0.5 / y } else { 0.0 }).collect();
                    acc(&mut grads, *a, d);
                }
                Op::Exp(a) => {
                    let d = g.iter().zip(out.data()).map(|(gk, y)| gk * y).collect();
                    acc(&mut grads, *a, d);
                }
                Op::Ln(a) => {
                    let d = g.iter().zip(val(*a).data()).map(|(gk, x)| gk / x).collect();
                    acc(&mut grads, *a, d);
                }
                Op::PowF(a, p) => {
                    let d = g
                        .iter()
                        .zip(val(*a).data())
                        .map(|(gk, &x)| {
                            if x == 0.0 && *p >= 1.0 {
                                if *p == 1.0 {
                                    *gk
                                } else {
                                    0.0
                                }
                            } else {
                                gk * p * x.powf(p - 1.0)
                            }
                        })
                        .collect();
                    acc(&mut grads, *a, d);
                }
                Op::Huber(a, delta) => {
                    let d = g
                        .iter()
                        .zip(val(*a).data())
                        .map(|(gk, &x)| if x.abs() <= *delta { gk * x } else { gk * delta * x.signum() })
                        .collect();
                    acc(&mut grads, *a, d);
                }
                Op::Sum(a) => acc(&mut grads, *a, vec![g[0]; val(*a).numel()]),
                Op::Mean(a) => {
                    let n = val(*a).numel();
                    acc(&mut grads, *a, vec![g[0] / n as f64; n]);
                }
                Op::L2Norm(a) => {
                    let norm = out.data()[0];
                    let d = if norm > 0.0 {
                        val(*a).data().iter().map(|x| g[0] * x / norm).collect()
                    } else {
                        vec![0.0; val(*a).numel()]
                    };
                    acc(&mut grads, *a, d);
                }
                Op::Concat(ids) => {
                    let mut off = 0;
                    for &i in ids {
                        let n = val(i).numel();
                        acc(&mut grads, i, g[off..off + n].to_vec());
                        off += n;
                    }
                }
                Op::Gather(a, idx) => {
                    let mut d = vec![0.0; val(*a).numel()];
                    for (gk, &i) in g.iter().zip(idx.iter()) {
                        d[i] += gk;
                    }
                    acc(&mut grads, *a, d);
                }
                Op::Downsample2x(a) => {
                    let s = val(*a).shape();
                    let (c, h, w) = (s[0], s[1], s[2]);
                    let (ho, wo) = (h / 2, w / 2);
                    let mut d = vec![0.0; c * h * w];
                    for ch in 0..c {
                        for oy in 0..ho {
                            for ox in 0..wo {
                                let q = 0.25 * g[(ch * ho + oy) * wo + ox];
                                let base = ch * h * w + 2 * oy * w + 2 * ox;
                                d[base] += q;
                                d[base + 1] += q;
                                d[base + w] += q;
                                d[base + w + 1] += q;
                            }
                        }
                    }
                    acc(&mut grads, *a, d);
                }
                Op::ClampMin(a, lo) => {
                    let d = g.iter().zip(val(*a).data()).map(|(gk, &x)| if x >= *lo { *gk } else { 0.0 }).collect();
                    acc(&mut grads, *a, d);
                }
                Op::Clamp(a, lo, hi) => {
                    let d = g
                        .iter()
                        .zip(val(*a).data())
                        .map(|(gk, &x)| if x >= *lo && x <= *hi { *gk } else { 0.0 })
                        .collect();
                    acc(&mut grads, *a, d);
                }
                Op::LogSoftmax(a) => {
                    let total: f64 = g.iter().sum();
                    let d = g.iter().zip(out.data()).map(|(gk, y)| gk - y.exp() * total).collect();
                    acc(&mut grads, *a, d);
                }
                Op::LogdetPsd(a, inv) => {
                    acc(&mut grads, *a, inv.data().iter().map(|x| g[0] * x).collect());
                }
            }
        }

        for (id, g) in leaf_grads {
            let node = &mut self.nodes[id];
            match &mut node.grad {
                Some(t) => t.data_mut().iter_mut().zip(g).for_each(|(a, d)| *a += d),
                None => node.grad = Some(Tensor::new(node.value.shape().to_vec(), g)?),
            }
        }
        Ok(())
    }
}
