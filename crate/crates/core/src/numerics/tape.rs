//! Define-by-run reverse-mode automatic differentiation.
//!
//! Every operation appends a node holding its forward value. Nodes that
//! depend on a leaf created with `requires_grad = true` also keep the
//! operation and its inputs so [`Tape::backward`] can replay the chain rule
//! in reverse insertion order, summing contributions from every consumer.

use super::kernels::{self, ConvDims, ConvSpec};
use super::scan;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Operation kinds, used for diagnostics and fault injection.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Add,
    Sub,
    Mul,
    Div,
    MatMul,
    Transpose,
    Reshape,
    Concat,
    Slice,
    Pad,
    Conv1d,
    ConvTranspose1d,
    Softmax,
    LayerNorm,
    Gelu,
    Silu,
    Softplus,
    Sigmoid,
    Exp,
    Log,
    Sqrt,
    Abs,
    Power,
    Scale,
    Offset,
    Sum,
    Mean,
    SumAxis,
    MeanAxis,
    LinearScan,
    ZohGain,
}

impl OpKind {
    pub const ALL: [OpKind; 31] = [
        OpKind::Add,
        OpKind::Sub,
        OpKind::Mul,
        OpKind::Div,
        OpKind::MatMul,
        OpKind::Transpose,
        OpKind::Reshape,
        OpKind::Concat,
        OpKind::Slice,
        OpKind::Pad,
        OpKind::Conv1d,
        OpKind::ConvTranspose1d,
        OpKind::Softmax,
        OpKind::LayerNorm,
        OpKind::Gelu,
        OpKind::Silu,
        OpKind::Softplus,
        OpKind::Sigmoid,
        OpKind::Exp,
        OpKind::Log,
        OpKind::Sqrt,
        OpKind::Abs,
        OpKind::Power,
        OpKind::Scale,
        OpKind::Offset,
        OpKind::Sum,
        OpKind::Mean,
        OpKind::SumAxis,
        OpKind::MeanAxis,
        OpKind::LinearScan,
        OpKind::ZohGain,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Div => "div",
            OpKind::MatMul => "matmul",
            OpKind::Transpose => "transpose",
            OpKind::Reshape => "reshape",
            OpKind::Concat => "concat",
            OpKind::Slice => "slice",
            OpKind::Pad => "pad",
            OpKind::Conv1d => "conv1d",
            OpKind::ConvTranspose1d => "conv_transpose1d",
            OpKind::Softmax => "softmax",
            OpKind::LayerNorm => "layer_norm",
            OpKind::Gelu => "gelu",
            OpKind::Silu => "silu",
            OpKind::Softplus => "softplus",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Exp => "exp",
            OpKind::Log => "log",
            OpKind::Sqrt => "sqrt",
            OpKind::Abs => "abs",
            OpKind::Power => "power",
            OpKind::Scale => "scale",
            OpKind::Offset => "offset",
            OpKind::Sum => "sum",
            OpKind::Mean => "mean",
            OpKind::SumAxis => "sum_axis",
            OpKind::MeanAxis => "mean_axis",
            OpKind::LinearScan => "linear_scan",
            OpKind::ZohGain => "zoh_gain",
        }
    }

    pub fn from_name(name: &str) -> Option<OpKind> {
        OpKind::ALL.into_iter().find(|k| k.name() == name)
    }
}

#[derive(Clone, Copy, Debug)]
enum Unary {
    Exp,
    Log,
    Sqrt,
    Abs,
    Gelu,
    Silu,
    Softplus,
    Sigmoid,
    Power(f64),
    Scale(f64),
    Offset(f64),
}

impl Unary {
    fn kind(self) -> OpKind {
        match self {
            Unary::Exp => OpKind::Exp,
            Unary::Log => OpKind::Log,
            Unary::Sqrt => OpKind::Sqrt,
            Unary::Abs => OpKind::Abs,
            Unary::Gelu => OpKind::Gelu,
            Unary::Silu => OpKind::Silu,
            Unary::Softplus => OpKind::Softplus,
            Unary::Sigmoid => OpKind::Sigmoid,
            Unary::Power(_) => OpKind::Power,
            Unary::Scale(_) => OpKind::Scale,
            Unary::Offset(_) => OpKind::Offset,
        }
    }

    fn apply(self, x: f64) -> f64 {
        match self {
            Unary::Exp => x.exp(),
            Unary::Log => x.ln(),
            Unary::Sqrt => x.sqrt(),
            Unary::Abs => x.abs(),
            Unary::Gelu => kernels::gelu(x),
            Unary::Silu => kernels::silu(x),
            Unary::Softplus => kernels::softplus(x),
            Unary::Sigmoid => kernels::sigmoid(x),
            Unary::Power(p) => x.powf(p),
            Unary::Scale(c) => c * x,
            Unary::Offset(c) => x + c,
        }
    }

    /// dy/dx given input `x` and output `y`.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Unary::Exp => y,
            Unary::Log => 1.0 / x,
            Unary::Sqrt => 0.5 / y,
            Unary::Abs => {
                if x > 0.0 {
                    1.0
                } else if x < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            }
            Unary::Gelu => kernels::gelu_grad(x),
            Unary::Silu => kernels::silu_grad(x),
            Unary::Softplus => kernels::sigmoid(x),
            Unary::Sigmoid => y * (1.0 - y),
            Unary::Power(p) => p * x.powf(p - 1.0),
            Unary::Scale(c) => c,
            Unary::Offset(_) => 1.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
    ZohGain,
}

impl Binary {
    fn kind(self) -> OpKind {
        match self {
            Binary::Add => OpKind::Add,
            Binary::Sub => OpKind::Sub,
            Binary::Mul => OpKind::Mul,
            Binary::Div => OpKind::Div,
            Binary::ZohGain => OpKind::ZohGain,
        }
    }

    fn apply(self, a: f64, b: f64) -> f64 {
        match self {
            Binary::Add => a + b,
            Binary::Sub => a - b,
            Binary::Mul => a * b,
            Binary::Div => a / b,
            Binary::ZohGain => kernels::zoh_gain(a, b),
        }
    }

    fn partials(self, a: f64, b: f64) -> (f64, f64) {
        match self {
            Binary::Add => (1.0, 1.0),
            Binary::Sub => (1.0, -1.0),
            Binary::Mul => (b, a),
            Binary::Div => (1.0 / b, -a / (b * b)),
            Binary::ZohGain => kernels::zoh_gain_grad(a, b),
        }
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Constant,
    Binary(Binary, Var, Var),
    Unary(Unary, Var),
    MatMul(Var, Var),
    Transpose(Var, usize, usize),
    Reshape(Var),
    Concat(Vec<Var>, usize),
    Slice { x: Var, axis: usize, start: usize },
    Pad { x: Var, axis: usize, before: usize },
    Conv1d { x: Var, w: Var, spec: ConvSpec },
    ConvTranspose1d { x: Var, w: Var, spec: ConvSpec },
    Softmax(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var },
    Sum(Var),
    Mean(Var),
    SumAxis(Var, usize),
    MeanAxis(Var, usize),
    LinearScan { decay: Var, drive: Var },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Layer-norm variance floor.
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Recording of one forward computation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    fault: Option<OpKind>,
}

/// Gradients of a scalar loss with respect to the tape's trainable leaves.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for `v`, if `v` is a leaf created with `requires_grad`.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    /// Corrupts the backward rule of `kind` (gradients scaled by 1.5).
    /// Only used as a negative control for gradient checking.
    #[doc(hidden)]
    pub fn inject_fault(&mut self, kind: OpKind) {
        self.fault = Some(kind);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.constant(Tensor::scalar(value))
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

    fn push(&mut self, kind: OpKind, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        if cfg!(debug_assertions) && !value.is_finite() {
            return Err(Error::NonFinite { op: kind.name() });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op: if requires_grad { op } else { Op::Constant },
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    // ----- elementwise -----------------------------------------------------

    fn binary(&mut self, op: Binary, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let out_shape = kernels::broadcast_shape(ta.shape(), tb.shape())
            .ok_or_else(|| Error::shape(op.kind().name(), ta.shape(), tb.shape()))?;
        let data = if ta.shape() == tb.shape() {
            ta.data()
                .iter()
                .zip(tb.data())
                .map(|(&x, &y)| op.apply(x, y))
                .collect()
        } else {
            let sa = kernels::broadcast_strides(ta.shape(), &out_shape);
            let sb = kernels::broadcast_strides(tb.shape(), &out_shape);
            let mut out = vec![0.0; out_shape.iter().product()];
            let (da, db) = (ta.data(), tb.data());
            kernels::walk_broadcast(&out_shape, &sa, &sb, |i, ia, ib| {
                out[i] = op.apply(da[ia], db[ib])
            });
            out
        };
        let value = Tensor::new(out_shape, data)?;
        self.push(op.kind(), value, Op::Binary(op, a, b), &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Div, a, b)
    }

    /// ZOH input gain `(exp(Δ·a) − 1)/a` elementwise (broadcasting), limit `Δ` as `Δ·a → 0`.
    pub fn zoh_gain(&mut self, a: Var, delta: Var) -> Result<Var> {
        self.binary(Binary::ZohGain, a, delta)
    }

    fn unary(&mut self, op: Unary, x: Var) -> Result<Var> {
        let value = self.value(x).map(|v| op.apply(v));
        self.push(op.kind(), value, Op::Unary(op, x), &[x])
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Exp, x)
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Log, x)
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Sqrt, x)
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Abs, x)
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Gelu, x)
    }

    pub fn silu(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Silu, x)
    }

    pub fn softplus(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Softplus, x)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Sigmoid, x)
    }

    pub fn powf(&mut self, x: Var, p: f64) -> Result<Var> {
        self.unary(Unary::Power(p), x)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.unary(Unary::Scale(c), x)
    }

    pub fn neg(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Scale(-1.0), x)
    }

    pub fn offset(&mut self, x: Var, c: f64) -> Result<Var> {
        self.unary(Unary::Offset(c), x)
    }

    // ----- linear algebra and shape ------------------------------------------

    /// `[..., m, k] × [k, n]` or batched `[B, m, k] × [B, k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (sa, sb) = (ta.shape(), tb.shape());
        let err = || Error::shape("matmul", sa, sb);
        if sa.len() < 2 || !(sb.len() == 2 || sb.len() == sa.len()) {
            return Err(err());
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != kb {
            return Err(err());
        }
        let mut out_shape = sa.to_vec();
        *out_shape.last_mut().unwrap() = n;
        let mut out = vec![0.0; out_shape.iter().product()];
        if sb.len() == 2 {
            let rows = ta.numel() / k;
            kernels::matmul_acc(ta.data(), tb.data(), &mut out, rows, k, n);
        } else {
            if sa[..sa.len() - 2] != sb[..sb.len() - 2] {
                return Err(err());
            }
            let batch = ta.numel() / (m * k);
            for i in 0..batch {
                kernels::matmul_acc(
                    &ta.data()[i * m * k..(i + 1) * m * k],
                    &tb.data()[i * k * n..(i + 1) * k * n],
                    &mut out[i * m * n..(i + 1) * m * n],
                    m,
                    k,
                    n,
                );
            }
        }
        let value = Tensor::new(out_shape, out)?;
        self.push(OpKind::MatMul, value, Op::MatMul(a, b), &[a, b])
    }

    pub fn transpose(&mut self, x: Var, d0: usize, d1: usize) -> Result<Var> {
        let t = self.value(x);
        if d0 >= t.rank() || d1 >= t.rank() {
            return Err(Error::invalid(
                "transpose",
                format!("axes ({d0}, {d1}) out of range for shape {:?}", t.shape()),
            ));
        }
        let (data, shape) = kernels::transpose_axes(t.data(), t.shape(), d0, d1);
        let value = Tensor::new(shape, data)?;
        self.push(OpKind::Transpose, value, Op::Transpose(x, d0, d1), &[x])
    }

    /// Transpose of the last two axes.
    pub fn t(&mut self, x: Var) -> Result<Var> {
        let r = self.value(x).rank();
        if r < 2 {
            return Err(Error::invalid("transpose", "needs rank ≥ 2"));
        }
        self.transpose(x, r - 2, r - 1)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x);
        let numel: usize = shape.iter().product();
        if numel != t.numel() {
            return Err(Error::shape("reshape", t.shape(), shape));
        }
        let value = Tensor::new(shape.to_vec(), t.data().to_vec())?;
        self.push(OpKind::Reshape, value, Op::Reshape(x), &[x])
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::invalid("concat", "no inputs"))?;
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return Err(Error::invalid("concat", format!("axis {axis} out of range")));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let same_rank = s.len() == base.len();
            if !same_rank || s.iter().zip(&base).enumerate().any(|(i, (x, y))| i != axis && x != y) {
                return Err(Error::shape("concat", &base, s));
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let t = self.value(p);
                let chunk = t.shape()[axis] * inner;
                data.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let value = Tensor::new(shape, data)?;
        self.push(OpKind::Concat, value, Op::Concat(parts.to_vec(), axis), parts)
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        let s = t.shape();
        if axis >= s.len() || start + len > s[axis] {
            return Err(Error::invalid(
                "slice",
                format!("range {start}..{} on axis {axis} of {s:?}", start + len),
            ));
        }
        let outer: usize = s[..axis].iter().product();
        let inner: usize = s[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * s[axis] + start) * inner;
            data.extend_from_slice(&t.data()[base..base + len * inner]);
        }
        let mut shape = s.to_vec();
        shape[axis] = len;
        let value = Tensor::new(shape, data)?;
        self.push(OpKind::Slice, value, Op::Slice { x, axis, start }, &[x])
    }

    /// Zero padding along one axis.
    pub fn pad(&mut self, x: Var, axis: usize, before: usize, after: usize) -> Result<Var> {
        let t = self.value(x);
        let s = t.shape();
        if axis >= s.len() {
            return Err(Error::invalid("pad", format!("axis {axis} out of range for {s:?}")));
        }
        let outer: usize = s[..axis].iter().product();
        let inner: usize = s[axis + 1..].iter().product();
        let len = s[axis] + before + after;
        let mut data = vec![0.0; outer * len * inner];
        for o in 0..outer {
            let src = &t.data()[o * s[axis] * inner..(o + 1) * s[axis] * inner];
            let dst = (o * len + before) * inner;
            data[dst..dst + src.len()].copy_from_slice(src);
        }
        let mut shape = s.to_vec();
        shape[axis] = len;
        let value = Tensor::new(shape, data)?;
        self.push(OpKind::Pad, value, Op::Pad { x, axis, before }, &[x])
    }

    // ----- convolutions ------------------------------------------------------

    fn conv_dims(&self, x: Var, w: Var, spec: &ConvSpec, transposed: bool) -> Result<ConvDims> {
        let op = if transposed { "conv_transpose1d" } else { "conv1d" };
        let (sx, sw) = (self.shape(x), self.shape(w));
        if sx.len() != 2 || sw.len() != 3 || spec.stride == 0 || spec.groups == 0 {
            return Err(Error::shape(op, sx, sw));
        }
        let (t_in, c_in, k) = (sx[0], sx[1], sw[2]);
        let g = spec.groups;
        let c_out = if transposed {
            if sw[0] != c_in {
                return Err(Error::shape(op, sx, sw));
            }
            sw[1] * g
        } else {
            if sw[1] * g != c_in {
                return Err(Error::shape(op, sx, sw));
            }
            sw[0]
        };
        if c_in % g != 0 || c_out % g != 0 {
            return Err(Error::shape(op, sx, sw));
        }
        let t_out = if transposed {
            let full = (t_in.max(1) - 1) * spec.stride + k;
            full.checked_sub(spec.pad_left + spec.pad_right)
        } else {
            (t_in + spec.pad_left + spec.pad_right)
                .checked_sub(k)
                .map(|span| span / spec.stride + 1)
        };
        let t_out = t_out.filter(|_| t_in > 0).ok_or_else(|| {
            Error::invalid(op, format!("input length {t_in} too short for kernel {k}"))
        })?;
        Ok(ConvDims {
            t_in,
            c_in,
            c_out,
            k,
            t_out,
        })
    }

    /// 1-D convolution. `x: [T, C_in]`, `w: [C_out, C_in/groups, K]`.
    pub fn conv1d(&mut self, x: Var, w: Var, spec: ConvSpec) -> Result<Var> {
        let d = self.conv_dims(x, w, &spec, false)?;
        let y = kernels::conv1d_forward(self.value(x).data(), self.value(w).data(), &d, &spec);
        let value = Tensor::new(vec![d.t_out, d.c_out], y)?;
        self.push(OpKind::Conv1d, value, Op::Conv1d { x, w, spec }, &[x, w])
    }

    /// Transposed 1-D convolution. `x: [T, C_in]`, `w: [C_in, C_out/groups, K]`;
    /// output length `(T−1)·stride + K − pad_left − pad_right`.
    pub fn conv_transpose1d(&mut self, x: Var, w: Var, spec: ConvSpec) -> Result<Var> {
        let d = self.conv_dims(x, w, &spec, true)?;
        let y = kernels::conv_transpose1d_forward(self.value(x).data(), self.value(w).data(), &d, &spec);
        let value = Tensor::new(vec![d.t_out, d.c_out], y)?;
        self.push(
            OpKind::ConvTranspose1d,
            value,
            Op::ConvTranspose1d { x, w, spec },
            &[x, w],
        )
    }

    // ----- normalisation -----------------------------------------------------

    /// Softmax over the last axis, max-subtracted.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let d = *t
            .shape()
            .last()
            .ok_or_else(|| Error::invalid("softmax", "scalar input"))?;
        let mut data = t.data().to_vec();
        for row in data.chunks_mut(d.max(1)) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        let value = Tensor::new(t.shape().to_vec(), data)?;
        self.push(OpKind::Softmax, value, Op::Softmax(x), &[x])
    }

    /// Layer normalisation over the last axis with affine `gamma`, `beta` of shape `[D]`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let t = self.value(x);
        let d = *t
            .shape()
            .last()
            .ok_or_else(|| Error::invalid("layer_norm", "scalar input"))?;
        for p in [gamma, beta] {
            if self.shape(p) != [d] {
                return Err(Error::shape("layer_norm", t.shape(), self.shape(p)));
            }
        }
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut data = t.data().to_vec();
        for row in data.chunks_mut(d) {
            let (mean, inv) = row_stats(row);
            for (j, v) in row.iter_mut().enumerate() {
                *v = (*v - mean) * inv * g[j] + b[j];
            }
        }
        let value = Tensor::new(t.shape().to_vec(), data)?;
        self.push(
            OpKind::LayerNorm,
            value,
            Op::LayerNorm { x, gamma, beta },
            &[x, gamma, beta],
        )
    }

    // ----- reductions --------------------------------------------------------

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s: f64 = self.value(x).data().iter().sum();
        self.push(OpKind::Sum, Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let s: f64 = t.data().iter().sum::<f64>() / t.numel() as f64;
        self.push(OpKind::Mean, Tensor::scalar(s), Op::Mean(x), &[x])
    }

    fn reduce_axis(&mut self, x: Var, axis: usize, mean: bool) -> Result<Var> {
        let kind = if mean { OpKind::MeanAxis } else { OpKind::SumAxis };
        let t = self.value(x);
        let s = t.shape();
        if axis >= s.len() {
            return Err(Error::invalid(kind.name(), format!("axis {axis} out of range for {s:?}")));
        }
        let outer: usize = s[..axis].iter().product();
        let inner: usize = s[axis + 1..].iter().product();
        let n = s[axis];
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for a in 0..n {
                let src = &t.data()[(o * n + a) * inner..][..inner];
                for (d, &v) in data[o * inner..][..inner].iter_mut().zip(src) {
                    *d += v;
                }
            }
        }
        if mean {
            for v in &mut data {
                *v /= n as f64;
            }
        }
        let mut shape = s.to_vec();
        shape[axis] = 1;
        let value = Tensor::new(shape, data)?;
        let op = if mean {
            Op::MeanAxis(x, axis)
        } else {
            Op::SumAxis(x, axis)
        };
        self.push(kind, value, op, &[x])
    }

    /// Sum over one axis, kept with extent 1.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce_axis(x, axis, false)
    }

    /// Mean over one axis, kept with extent 1.
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce_axis(x, axis, true)
    }

    // ----- recurrences -------------------------------------------------------

    /// First-order linear recurrence `h_t = decay_t ⊙ h_{t−1} + drive_t` with `h_0 = 0`.
    ///
    /// `drive` is time-major `[T, ...]`; `decay` has the same shape or omits the
    /// leading time axis (time-invariant).
    pub fn linear_scan(&mut self, decay: Var, drive: Var) -> Result<Var> {
        let (td, tx) = (self.value(decay), self.value(drive));
        let sx = tx.shape();
        if sx.is_empty() || !(td.shape() == sx || td.shape() == &sx[1..]) {
            return Err(Error::shape("linear_scan", td.shape(), sx));
        }
        let t_len = sx[0];
        let lanes = if t_len == 0 { 0 } else { tx.numel() / t_len };
        let h = scan::scan_lanes(td.data(), tx.data(), t_len, lanes);
        let value = Tensor::new(sx.to_vec(), h)?;
        self.push(
            OpKind::LinearScan,
            value,
            Op::LinearScan { decay, drive },
            &[decay, drive],
        )
    }

    // ----- backward ----------------------------------------------------------

    /// Reverse pass from a one-element `loss`.
    ///
    /// Every leaf created with `requires_grad` receives a gradient, zero if the
    /// loss does not depend on it.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lt = self.value(loss);
        if lt.numel() != 1 {
            return Err(Error::NonScalarLoss(lt.shape().to_vec()));
        }
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..n).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf | Op::Constant) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let contributions = self.node_backward(node, &g);
            let scale = match self.fault {
                Some(f) if f == op_kind(&node.op) => 1.5,
                _ => 1.0,
            };
            for (v, mut cg) in contributions {
                if !self.nodes[v.0].requires_grad {
                    continue;
                }
                if scale != 1.0 {
                    cg.iter_mut().for_each(|x| *x *= scale);
                }
                match &mut grads[v.0] {
                    Some(acc) => acc.iter_mut().zip(&cg).for_each(|(a, c)| *a += c),
                    slot => *slot = Some(cg),
                }
            }
        }
        let mut out = Vec::with_capacity(self.nodes.len());
        for (i, node) in self.nodes.iter().enumerate() {
            let leaf = matches!(node.op, Op::Leaf) && node.requires_grad;
            let g = if leaf {
                let data = grads
                    .get_mut(i)
                    .and_then(Option::take)
                    .unwrap_or_else(|| vec![0.0; node.value.numel()]);
                Some(Tensor::new(node.value.shape().to_vec(), data)?)
            } else {
                None
            };
            out.push(g);
        }
        Ok(Gradients { grads: out })
    }

    fn node_backward(&self, node: &Node, g: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let out = &node.value;
        match &node.op {
            Op::Leaf | Op::Constant => Vec::new(),
            Op::Binary(op, a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let shape = out.shape();
                let mut ga = vec![0.0; g.len()];
                let mut gb = vec![0.0; g.len()];
                let sa = kernels::broadcast_strides(ta.shape(), shape);
                let sb = kernels::broadcast_strides(tb.shape(), shape);
                let (da, db) = (ta.data(), tb.data());
                kernels::walk_broadcast(shape, &sa, &sb, |i, ia, ib| {
                    let (pa, pb) = op.partials(da[ia], db[ib]);
                    ga[i] = g[i] * pa;
                    gb[i] = g[i] * pb;
                });
                vec![
                    (*a, kernels::reduce_to(&ga, shape, ta.shape())),
                    (*b, kernels::reduce_to(&gb, shape, tb.shape())),
                ]
            }
            Op::Unary(op, x) => {
                let tx = self.value(*x);
                let gx = tx
                    .data()
                    .iter()
                    .zip(out.data())
                    .zip(g)
                    .map(|((&xi, &yi), &gi)| gi * op.derivative(xi, yi))
                    .collect();
                vec![(*x, gx)]
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (sa, sb) = (ta.shape(), tb.shape());
                let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
                let n = sb[sb.len() - 1];
                let mut ga = vec![0.0; ta.numel()];
                let mut gb = vec![0.0; tb.numel()];
                if sb.len() == 2 {
                    let rows = ta.numel() / k;
                    kernels::matmul_nt_acc(g, tb.data(), &mut ga, rows, n, k);
                    kernels::matmul_tn_acc(ta.data(), g, &mut gb, rows, k, n);
                } else {
                    let batch = ta.numel() / (m * k);
                    for i in 0..batch {
                        let gi = &g[i * m * n..(i + 1) * m * n];
                        kernels::matmul_nt_acc(
                            gi,
                            &tb.data()[i * k * n..(i + 1) * k * n],
                            &mut ga[i * m * k..(i + 1) * m * k],
                            m,
                            n,
                            k,
                        );
                        kernels::matmul_tn_acc(
                            &ta.data()[i * m * k..(i + 1) * m * k],
                            gi,
                            &mut gb[i * k * n..(i + 1) * k * n],
                            m,
                            k,
                            n,
                        );
                    }
                }
                vec![(*a, ga), (*b, gb)]
            }
            Op::Transpose(x, d0, d1) => {
                let (gx, _) = kernels::transpose_axes(g, out.shape(), *d0, *d1);
                vec![(*x, gx)]
            }
            Op::Reshape(x) => vec![(*x, g.to_vec())],
            Op::Concat(parts, axis) => {
                let s = out.shape();
                let outer: usize = s[..*axis].iter().product();
                let inner: usize = s[axis + 1..].iter().product();
                let mut offset = 0;
                let mut res = Vec::with_capacity(parts.len());
                for &p in parts {
                    let len = self.shape(p)[*axis];
                    let mut gp = Vec::with_capacity(outer * len * inner);
                    for o in 0..outer {
                        let base = (o * s[*axis] + offset) * inner;
                        gp.extend_from_slice(&g[base..base + len * inner]);
                    }
                    offset += len;
                    res.push((p, gp));
                }
                res
            }
            Op::Slice { x, axis, start } => {
                let s = self.shape(*x);
                let outer: usize = s[..*axis].iter().product();
                let inner: usize = s[axis + 1..].iter().product();
                let len = out.shape()[*axis];
                let mut gx = vec![0.0; outer * s[*axis] * inner];
                for o in 0..outer {
                    let dst = (o * s[*axis] + start) * inner;
                    gx[dst..dst + len * inner]
                        .copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                vec![(*x, gx)]
            }
            Op::Pad { x, axis, before } => {
                let s = self.shape(*x);
                let outer: usize = s[..*axis].iter().product();
                let inner: usize = s[axis + 1..].iter().product();
                let len = out.shape()[*axis];
                let mut gx = Vec::with_capacity(self.value(*x).numel());
                for o in 0..outer {
                    let src = (o * len + before) * inner;
                    gx.extend_from_slice(&g[src..src + s[*axis] * inner]);
                }
                vec![(*x, gx)]
            }
            Op::Conv1d { x, w, spec } => {
                let d = self.conv_dims(*x, *w, spec, false).expect("validated in forward");
                let (gx, gw) =
                    kernels::conv1d_backward(self.value(*x).data(), self.value(*w).data(), g, &d, spec);
                vec![(*x, gx), (*w, gw)]
            }
            Op::ConvTranspose1d { x, w, spec } => {
                let d = self.conv_dims(*x, *w, spec, true).expect("validated in forward");
                let (gx, gw) = kernels::conv_transpose1d_backward(
                    self.value(*x).data(),
                    self.value(*w).data(),
                    g,
                    &d,
                    spec,
                );
                vec![(*x, gx), (*w, gw)]
            }
            Op::Softmax(x) => {
                let d = *out.shape().last().unwrap();
                let mut gx = vec![0.0; g.len()];
                for ((yr, gr), dst) in out
                    .data()
                    .chunks(d)
                    .zip(g.chunks(d))
                    .zip(gx.chunks_mut(d))
                {
                    let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                    for j in 0..d {
                        dst[j] = yr[j] * (gr[j] - dot);
                    }
                }
                vec![(*x, gx)]
            }
            Op::LayerNorm { x, gamma, beta } => {
                let tx = self.value(*x);
                let gam = self.value(*gamma).data();
                let d = gam.len();
                let mut gx = vec![0.0; tx.numel()];
                let mut gg = vec![0.0; d];
                let mut gb = vec![0.0; d];
                for ((xr, gr), dst) in tx.data().chunks(d).zip(g.chunks(d)).zip(gx.chunks_mut(d)) {
                    let (mean, inv) = row_stats(xr);
                    let mut sum_gh = 0.0;
                    let mut sum_gh_xh = 0.0;
                    for j in 0..d {
                        let xh = (xr[j] - mean) * inv;
                        let gh = gr[j] * gam[j];
                        gg[j] += gr[j] * xh;
                        gb[j] += gr[j];
                        sum_gh += gh;
                        sum_gh_xh += gh * xh;
                    }
                    let dn = d as f64;
                    for j in 0..d {
                        let xh = (xr[j] - mean) * inv;
                        let gh = gr[j] * gam[j];
                        dst[j] = inv * (gh - sum_gh / dn - xh * sum_gh_xh / dn);
                    }
                }
                vec![(*x, gx), (*gamma, gg), (*beta, gb)]
            }
            Op::Sum(x) => vec![(*x, vec![g[0]; self.value(*x).numel()])],
            Op::Mean(x) => {
                let n = self.value(*x).numel();
                vec![(*x, vec![g[0] / n as f64; n])]
            }
            Op::SumAxis(x, axis) | Op::MeanAxis(x, axis) => {
                let s = self.shape(*x);
                let outer: usize = s[..*axis].iter().product();
                let inner: usize = s[axis + 1..].iter().product();
                let n = s[*axis];
                let scale = if matches!(node.op, Op::MeanAxis(..)) {
                    1.0 / n as f64
                } else {
                    1.0
                };
                let mut gx = vec![0.0; outer * n * inner];
                for o in 0..outer {
                    for a in 0..n {
                        let dst = &mut gx[(o * n + a) * inner..][..inner];
                        for (dv, &gv) in dst.iter_mut().zip(&g[o * inner..][..inner]) {
                            *dv = gv * scale;
                        }
                    }
                }
                vec![(*x, gx)]
            }
            Op::LinearScan { decay, drive } => {
                let td = self.value(*decay);
                let h = out.data();
                let t_len = out.shape()[0];
                let lanes = if t_len == 0 { 0 } else { out.numel() / t_len };
                let varying = td.numel() == out.numel();
                let dec = |t: usize, l: usize| {
                    if varying {
                        td.data()[t * lanes + l]
                    } else {
                        td.data()[l]
                    }
                };
                let mut g_drive = vec![0.0; out.numel()];
                let mut g_decay = vec![0.0; td.numel()];
                for l in 0..lanes {
                    let mut lambda = 0.0;
                    for t in (0..t_len).rev() {
                        lambda = g[t * lanes + l]
                            + if t + 1 < t_len { dec(t + 1, l) * lambda } else { 0.0 };
                        g_drive[t * lanes + l] = lambda;
                        let prev = if t > 0 { h[(t - 1) * lanes + l] } else { 0.0 };
                        if varying {
                            g_decay[t * lanes + l] = lambda * prev;
                        } else {
                            g_decay[l] += lambda * prev;
                        }
                    }
                }
                vec![(*decay, g_decay), (*drive, g_drive)]
            }
        }
    }
}

fn row_stats(row: &[f64]) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, 1.0 / (var + LAYER_NORM_EPS).sqrt())
}

fn op_kind(op: &Op) -> OpKind {
    match op {
        Op::Leaf | Op::Constant => OpKind::Reshape,
        Op::Binary(b, ..) => b.kind(),
        Op::Unary(u, _) => u.kind(),
        Op::MatMul(..) => OpKind::MatMul,
        Op::Transpose(..) => OpKind::Transpose,
        Op::Reshape(_) => OpKind::Reshape,
        Op::Concat(..) => OpKind::Concat,
        Op::Slice { .. } => OpKind::Slice,
        Op::Pad { .. } => OpKind::Pad,
        Op::Conv1d { .. } => OpKind::Conv1d,
        Op::ConvTranspose1d { .. } => OpKind::ConvTranspose1d,
        Op::Softmax(_) => OpKind::Softmax,
        Op::LayerNorm { .. } => OpKind::LayerNorm,
        Op::Sum(_) => OpKind::Sum,
        Op::Mean(_) => OpKind::Mean,
        Op::SumAxis(..) => OpKind::SumAxis,
        Op::MeanAxis(..) => OpKind::MeanAxis,
        Op::LinearScan { .. } => OpKind::LinearScan,
    }
}
