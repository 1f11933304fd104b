//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! Every operation appends a node to the [`Graph`]; node indices are
//! therefore already in topological order and [`Graph::backward`] walks the
//! tape once in reverse. Gradients of interior nodes are kept, so callers can
//! read `∂loss/∂activation` for any intermediate [`Var`].
//!
//! Sequence tensors use a channel-last `[batch, length, channels]` layout;
//! feature vectors are `[batch, channels]`.

use std::sync::Arc;

use super::gemm::{gemm, View};
use super::{NnError, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Gelu,
    Sigmoid,
    Relu,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Pool {
    GlobalAvg,
    GlobalMax,
    AdaptiveAvg(usize),
}

/// Batch-norm statistics observed on one training batch.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Unbiased variance (divisor `n - 1`), as used for running estimates.
    pub var: Vec<f64>,
}

enum Op {
    Leaf,
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddBias {
        x: Var,
        b: Var,
    },
    MulChannel {
        x: Var,
        a: Var,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Conv1d {
        x: Var,
        w: Var,
        b: Option<Var>,
        dilation: usize,
        pad_left: usize,
    },
    Depthwise {
        x: Var,
        w: Var,
        b: Option<Var>,
        dilation: usize,
        pad_left: usize,
    },
    Act {
        x: Var,
        kind: Activation,
    },
    GroupNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    BatchNormTrain {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    BatchNormEval {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Concat {
        parts: Vec<Var>,
    },
    GlobalAvg {
        x: Var,
    },
    GlobalMax {
        x: Var,
        argmax: Vec<usize>,
    },
    AdaptiveAvg {
        x: Var,
        bins: Vec<(usize, usize)>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        scale: f64,
        weights: Vec<f64>,
    },
    Sum(Var),
    Mean(Var),
    Bce {
        p: Var,
        targets: Vec<f64>,
        eps: f64,
    },
}

struct Node {
    value: Arc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Recorded computation.
pub struct Graph {
    nodes: Vec<Node>,
    checked: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

/// Result of [`Graph::backward`]: one optional gradient per node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn shape_err(msg: impl Into<String>) -> NnError {
    NnError::Shape(msg.into())
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cdf + x * pdf
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Contiguous, non-overlapping bins of `len` items into `target` parts.
pub(crate) fn adaptive_bins(len: usize, target: usize) -> Vec<(usize, usize)> {
    (0..target)
        .map(|i| (i * len / target, (i + 1) * len / target))
        .collect()
}

fn seq_dims(t: &Tensor, what: &str) -> Result<(usize, usize, usize), NnError> {
    match *t.shape() {
        [b, l, c] => Ok((b, l, c)),
        ref s => Err(shape_err(format!("{what}: expected [batch, length, channels], got {s:?}"))),
    }
}

impl Graph {
    /// Graph that aborts on any non-finite value, naming the producing op.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            checked: true,
        }
    }

    /// Graph without the per-op finiteness scan.
    pub fn unchecked() -> Self {
        Self {
            nodes: Vec::new(),
            checked: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, name: &'static str) -> Result<Var, NnError> {
        if self.checked && !value.all_finite() {
            return Err(NnError::NonFinite { op: name });
        }
        let requires_grad = self.parents(&op).iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value: Arc::new(value),
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn parents(&self, op: &Op) -> Vec<Var> {
        match op {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::Scale(a, _) | Op::Sum(a) | Op::Mean(a) => vec![*a],
            Op::AddBias { x, b } => vec![*x, *b],
            Op::MulChannel { x, a } => vec![*x, *a],
            Op::Linear { x, w, b } | Op::Conv1d { x, w, b, .. } | Op::Depthwise { x, w, b, .. } => {
                let mut v = vec![*x, *w];
                v.extend(b.iter().copied());
                v
            }
            Op::Act { x, .. } | Op::GlobalAvg { x } | Op::GlobalMax { x, .. } | Op::AdaptiveAvg { x, .. } => {
                vec![*x]
            }
            Op::GroupNorm { x, gamma, beta, .. }
            | Op::BatchNormTrain { x, gamma, beta, .. }
            | Op::BatchNormEval { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::Concat { parts } => parts.clone(),
            Op::Attention { q, k, v, .. } => vec![*q, *k, *v],
            Op::Bce { p, .. } => vec![*p],
        }
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.leaf_shared(Arc::new(value), requires_grad)
    }

    pub fn leaf_shared(&mut self, value: Arc<Tensor>, requires_grad: bool) -> Var {
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Attention weights `[batch, heads, lq, lk]` recorded by an attention node.
    pub fn attention_weights(&self, v: Var) -> Option<(Vec<usize>, &[f64])> {
        match &self.nodes[v.0].op {
            Op::Attention { heads, weights, .. } => {
                let b = self.shape(v)[0];
                let lq = self.shape(v)[1];
                let lk = weights.len() / (b * heads * lq).max(1);
                Some((vec![b, *heads, lq, lk], weights.as_slice()))
            }
            _ => None,
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err(format!("add: {:?} vs {:?}", ta.shape(), tb.shape())));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let out = Tensor::new(ta.shape(), data)?;
        self.push(out, Op::Add(a, b), "add")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err(format!("mul: {:?} vs {:?}", ta.shape(), tb.shape())));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::new(ta.shape(), data)?;
        self.push(out, Op::Mul(a, b), "mul")
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var, NnError> {
        let ta = self.value(a);
        let out = Tensor::new(ta.shape(), ta.data().iter().map(|x| x * factor).collect())?;
        self.push(out, Op::Scale(a, factor), "scale")
    }

    /// `x + b` with `b` broadcast over every row of the channel axis.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var, NnError> {
        let (tx, tb) = (self.value(x), self.value(b));
        let c = tx.last_dim();
        if tb.len() != c {
            return Err(shape_err(format!("add_bias: {c} channels, bias {:?}", tb.shape())));
        }
        let mut data = tx.data().to_vec();
        for row in data.chunks_mut(c) {
            for (v, bb) in row.iter_mut().zip(tb.data()) {
                *v += bb;
            }
        }
        let out = Tensor::new(tx.shape(), data)?;
        self.push(out, Op::AddBias { x, b }, "add_bias")
    }

    /// Channel-wise scaling `x ⊙ a` with `a` of length `channels`.
    pub fn mul_channel(&mut self, x: Var, a: Var) -> Result<Var, NnError> {
        let (tx, ta) = (self.value(x), self.value(a));
        let c = tx.last_dim();
        if ta.len() != c {
            return Err(shape_err(format!("mul_channel: {c} channels, scale {:?}", ta.shape())));
        }
        let mut data = tx.data().to_vec();
        for row in data.chunks_mut(c) {
            for (v, s) in row.iter_mut().zip(ta.data()) {
                *v *= s;
            }
        }
        let out = Tensor::new(tx.shape(), data)?;
        self.push(out, Op::MulChannel { x, a }, "mul_channel")
    }

    /// Position-wise affine map `x · w + b`, `w: [c_in, c_out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var, NnError> {
        let (tx, tw) = (self.value(x), self.value(w));
        let (cin, cout) = match *tw.shape() {
            [i, o] => (i, o),
            ref s => return Err(shape_err(format!("linear: weight must be 2-D, got {s:?}"))),
        };
        if tx.last_dim() != cin {
            return Err(shape_err(format!(
                "linear: input has {} channels, weight expects {cin}",
                tx.last_dim()
            )));
        }
        let rows = tx.rows();
        let mut out = vec![0.0; rows * cout];
        gemm(
            rows,
            cin,
            cout,
            1.0,
            tx.data(),
            View::row_major(cin),
            tw.data(),
            View::row_major(cout),
            0.0,
            &mut out,
            View::row_major(cout),
        );
        if let Some(b) = b {
            let tb = self.value(b);
            if tb.len() != cout {
                return Err(shape_err(format!("linear: bias {:?} for {cout} outputs", tb.shape())));
            }
            for row in out.chunks_mut(cout) {
                for (v, bb) in row.iter_mut().zip(tb.data()) {
                    *v += bb;
                }
            }
        }
        let mut shape = tx.shape().to_vec();
        *shape.last_mut().expect("non-empty shape") = cout;
        let out = Tensor::new(&shape, out)?;
        self.push(out, Op::Linear { x, w, b }, "linear")
    }

    fn pad_left(kernel: usize, dilation: usize, causal: bool) -> usize {
        if causal {
            (kernel - 1) * dilation
        } else {
            (kernel - 1) * dilation / 2
        }
    }

    /// 1-D convolution with "same" output length. `w: [kernel, c_in, c_out]`.
    /// In causal mode the last tap reads the current position and earlier taps
    /// reach back by multiples of `dilation`.
    pub fn conv1d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        dilation: usize,
        causal: bool,
    ) -> Result<Var, NnError> {
        let (tx, tw) = (self.value(x), self.value(w));
        let (bsz, len, cin) = seq_dims(tx, "conv1d")?;
        let (kernel, wcin, cout) = match *tw.shape() {
            [k, i, o] => (k, i, o),
            ref s => return Err(shape_err(format!("conv1d: weight must be [k, c_in, c_out], got {s:?}"))),
        };
        if kernel == 0 || dilation == 0 {
            return Err(NnError::Config("conv1d: kernel and dilation must be >= 1".into()));
        }
        if wcin != cin {
            return Err(shape_err(format!("conv1d: input has {cin} channels, weight expects {wcin}")));
        }
        let pad_left = Self::pad_left(kernel, dilation, causal);
        let mut out = vec![0.0; bsz * len * cout];
        for bi in 0..bsz {
            for k in 0..kernel {
                let Some((t0, t1, shift)) = tap_range(len, k * dilation, pad_left) else {
                    continue;
                };
                let src = (bi * len) as isize + t0 as isize + shift;
                gemm(
                    t1 - t0,
                    cin,
                    cout,
                    1.0,
                    &tx.data()[src as usize * cin..],
                    View::row_major(cin),
                    &tw.data()[k * cin * cout..],
                    View::row_major(cout),
                    1.0,
                    &mut out[(bi * len + t0) * cout..],
                    View::row_major(cout),
                );
            }
        }
        if let Some(b) = b {
            let tb = self.value(b);
            if tb.len() != cout {
                return Err(shape_err(format!("conv1d: bias {:?} for {cout} outputs", tb.shape())));
            }
            for row in out.chunks_mut(cout) {
                for (v, bb) in row.iter_mut().zip(tb.data()) {
                    *v += bb;
                }
            }
        }
        let out = Tensor::new(&[bsz, len, cout], out)?;
        self.push(
            out,
            Op::Conv1d {
                x,
                w,
                b,
                dilation,
                pad_left,
            },
            "conv1d",
        )
    }

    /// Depthwise (per-channel) convolution, `w: [kernel, channels]`.
    pub fn depthwise_conv1d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        dilation: usize,
        causal: bool,
    ) -> Result<Var, NnError> {
        let (tx, tw) = (self.value(x), self.value(w));
        let (bsz, len, c) = seq_dims(tx, "depthwise_conv1d")?;
        let (kernel, wc) = match *tw.shape() {
            [k, ch] => (k, ch),
            ref s => return Err(shape_err(format!("depthwise_conv1d: weight must be [k, c], got {s:?}"))),
        };
        if kernel == 0 || dilation == 0 {
            return Err(NnError::Config("depthwise_conv1d: kernel and dilation must be >= 1".into()));
        }
        if wc != c {
            return Err(shape_err(format!("depthwise_conv1d: input has {c} channels, weight {wc}")));
        }
        let pad_left = Self::pad_left(kernel, dilation, causal);
        let (xd, wd) = (tx.data(), tw.data());
        let mut out = vec![0.0; bsz * len * c];
        for bi in 0..bsz {
            for k in 0..kernel {
                let Some((t0, t1, shift)) = tap_range(len, k * dilation, pad_left) else {
                    continue;
                };
                let wk = &wd[k * c..(k + 1) * c];
                for t in t0..t1 {
                    let src = ((bi * len) as isize + t as isize + shift) as usize * c;
                    let dst = (bi * len + t) * c;
                    for ch in 0..c {
                        out[dst + ch] += wk[ch] * xd[src + ch];
                    }
                }
            }
        }
        if let Some(b) = b {
            let tb = self.value(b);
            if tb.len() != c {
                return Err(shape_err("depthwise_conv1d: bias length"));
            }
            for row in out.chunks_mut(c) {
                for (v, bb) in row.iter_mut().zip(tb.data()) {
                    *v += bb;
                }
            }
        }
        let out = Tensor::new(&[bsz, len, c], out)?;
        self.push(
            out,
            Op::Depthwise {
                x,
                w,
                b,
                dilation,
                pad_left,
            },
            "depthwise_conv1d",
        )
    }

    pub fn activation(&mut self, kind: Activation, x: Var) -> Result<Var, NnError> {
        let tx = self.value(x);
        let f: fn(f64) -> f64 = match kind {
            Activation::Gelu => gelu,
            Activation::Sigmoid => sigmoid,
            Activation::Relu => |v| v.max(0.0),
        };
        let out = Tensor::new(tx.shape(), tx.data().iter().map(|&v| f(v)).collect())?;
        let name = match kind {
            Activation::Gelu => "gelu",
            Activation::Sigmoid => "sigmoid",
            Activation::Relu => "relu",
        };
        self.push(out, Op::Act { x, kind }, name)
    }

    /// Normalization over channel groups of each row (each position of each
    /// sample). `groups = 1` is layer normalization.
    pub fn group_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        eps: f64,
    ) -> Result<Var, NnError> {
        let tx = self.value(x);
        let c = tx.last_dim();
        if groups == 0 || !c.is_multiple_of(groups) {
            return Err(NnError::Config(format!(
                "group_norm: {c} channels not divisible into {groups} groups"
            )));
        }
        let (tg, tb) = (self.value(gamma), self.value(beta));
        if tg.len() != c || tb.len() != c {
            return Err(shape_err("group_norm: affine parameters must have one entry per channel"));
        }
        let gs = c / groups;
        let mut xhat = vec![0.0; tx.len()];
        let mut rstd = Vec::with_capacity(tx.rows() * groups);
        for (row_in, row_hat) in tx.data().chunks(c).zip(xhat.chunks_mut(c)) {
            for (src, dst) in row_in.chunks(gs).zip(row_hat.chunks_mut(gs)) {
                let mean = src.iter().sum::<f64>() / gs as f64;
                let var = src.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / gs as f64;
                let r = 1.0 / (var + eps).sqrt();
                for (d, s) in dst.iter_mut().zip(src) {
                    *d = (s - mean) * r;
                }
                rstd.push(r);
            }
        }
        let mut out = xhat.clone();
        for row in out.chunks_mut(c) {
            for ch in 0..c {
                row[ch] = row[ch] * tg.data()[ch] + tb.data()[ch];
            }
        }
        let out = Tensor::new(tx.shape(), out)?;
        self.push(
            out,
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                xhat,
                rstd,
            },
            "group_norm",
        )
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var, NnError> {
        self.group_norm(x, gamma, beta, 1, eps)
    }

    /// Batch normalization of `[batch, channels]` using the batch's own statistics.
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<(Var, BatchStats), NnError> {
        let tx = self.value(x);
        let (n, c) = match *tx.shape() {
            [n, c] => (n, c),
            ref s => return Err(shape_err(format!("batch_norm: expected [batch, channels], got {s:?}"))),
        };
        let (tg, tb) = (self.value(gamma), self.value(beta));
        if tg.len() != c || tb.len() != c {
            return Err(shape_err("batch_norm: affine parameters must have one entry per channel"));
        }
        let xd = tx.data();
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for row in xd.chunks(c) {
            for ch in 0..c {
                mean[ch] += row[ch];
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        for row in xd.chunks(c) {
            for ch in 0..c {
                var[ch] += (row[ch] - mean[ch]).powi(2);
            }
        }
        let pop_var: Vec<f64> = var.iter().map(|v| v / n as f64).collect();
        let rstd: Vec<f64> = pop_var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut xhat = vec![0.0; xd.len()];
        let mut out = vec![0.0; xd.len()];
        for (i, v) in xd.iter().enumerate() {
            let ch = i % c;
            xhat[i] = (v - mean[ch]) * rstd[ch];
            out[i] = xhat[i] * tg.data()[ch] + tb.data()[ch];
        }
        let unbiased = var
            .iter()
            .map(|v| if n > 1 { v / (n - 1) as f64 } else { 0.0 })
            .collect();
        let out = Tensor::new(&[n, c], out)?;
        let var_out = self.push(
            out,
            Op::BatchNormTrain {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            "batch_norm",
        )?;
        Ok((var_out, BatchStats { mean, var: unbiased }))
    }

    /// Batch normalization with fixed (running) statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[f64],
        running_var: &[f64],
        eps: f64,
    ) -> Result<Var, NnError> {
        let tx = self.value(x);
        let c = tx.last_dim();
        let (tg, tb) = (self.value(gamma), self.value(beta));
        if tg.len() != c || tb.len() != c || running_mean.len() != c || running_var.len() != c {
            return Err(shape_err("batch_norm: statistics must have one entry per channel"));
        }
        let rstd: Vec<f64> = running_var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut xhat = vec![0.0; tx.len()];
        let mut out = vec![0.0; tx.len()];
        for (i, v) in tx.data().iter().enumerate() {
            let ch = i % c;
            xhat[i] = (v - running_mean[ch]) * rstd[ch];
            out[i] = xhat[i] * tg.data()[ch] + tb.data()[ch];
        }
        let out = Tensor::new(tx.shape(), out)?;
        self.push(
            out,
            Op::BatchNormEval {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            "batch_norm",
        )
    }

    /// Concatenation along the channel (last) axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var, NnError> {
        let first = parts.first().ok_or_else(|| shape_err("concat: no inputs"))?;
        let lead = self.value(*first).shape()[..self.value(*first).shape().len() - 1].to_vec();
        let rows = self.value(*first).rows();
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let t = self.value(*p);
            if t.shape()[..t.shape().len() - 1] != lead[..] {
                return Err(shape_err(format!("concat: leading dims {:?} vs {:?}", t.shape(), lead)));
            }
            widths.push(t.last_dim());
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (p, w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(*p).data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        let out = Tensor::new(&shape, out)?;
        self.push(out, Op::Concat { parts: parts.to_vec() }, "concat")
    }

    /// Pooling along the length axis of `[batch, length, channels]`.
    pub fn pool(&mut self, kind: Pool, x: Var) -> Result<Var, NnError> {
        let tx = self.value(x);
        let (bsz, len, c) = seq_dims(tx, "pool")?;
        if len == 0 {
            return Err(shape_err("pool: empty length axis"));
        }
        let xd = tx.data();
        match kind {
            Pool::GlobalAvg => {
                let mut out = vec![0.0; bsz * c];
                for bi in 0..bsz {
                    for t in 0..len {
                        for ch in 0..c {
                            out[bi * c + ch] += xd[(bi * len + t) * c + ch];
                        }
                    }
                }
                out.iter_mut().for_each(|v| *v /= len as f64);
                let out = Tensor::new(&[bsz, c], out)?;
                self.push(out, Op::GlobalAvg { x }, "global_avg_pool")
            }
            Pool::GlobalMax => {
                let mut out = vec![f64::NEG_INFINITY; bsz * c];
                let mut argmax = vec![0; bsz * c];
                for bi in 0..bsz {
                    for t in 0..len {
                        for ch in 0..c {
                            let v = xd[(bi * len + t) * c + ch];
                            if v > out[bi * c + ch] {
                                out[bi * c + ch] = v;
                                argmax[bi * c + ch] = t;
                            }
                        }
                    }
                }
                let out = Tensor::new(&[bsz, c], out)?;
                self.push(out, Op::GlobalMax { x, argmax }, "global_max_pool")
            }
            Pool::AdaptiveAvg(target) => {
                if target == 0 || target > len {
                    return Err(shape_err(format!(
                        "adaptive_avg_pool: target {target} invalid for length {len}"
                    )));
                }
                let bins = adaptive_bins(len, target);
                let mut out = vec![0.0; bsz * target * c];
                for bi in 0..bsz {
                    for (j, &(s, e)) in bins.iter().enumerate() {
                        let dst = (bi * target + j) * c;
                        for t in s..e {
                            for ch in 0..c {
                                out[dst + ch] += xd[(bi * len + t) * c + ch];
                            }
                        }
                        let n = (e - s) as f64;
                        out[dst..dst + c].iter_mut().for_each(|v| *v /= n);
                    }
                }
                let out = Tensor::new(&[bsz, target, c], out)?;
                self.push(out, Op::AdaptiveAvg { x, bins }, "adaptive_avg_pool")
            }
        }
    }

    /// Multi-head scaled dot-product attention core.
    ///
    /// `q: [b, lq, heads·dh]`, `k: [b, lk, heads·dh]`, `v: [b, lk, heads·dv]`.
    /// Each head's logits are scaled by `1/√dh`. The row-stochastic weights
    /// are kept on the node (see [`Graph::attention_weights`]).
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var, NnError> {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        let (b, lq, dq) = seq_dims(tq, "attention(q)")?;
        let (bk, lk, dk) = seq_dims(tk, "attention(k)")?;
        let (bv, lv, dv) = seq_dims(tv, "attention(v)")?;
        if b != bk || b != bv || lk != lv || dq != dk {
            return Err(shape_err(format!(
                "attention: q {:?}, k {:?}, v {:?}",
                tq.shape(),
                tk.shape(),
                tv.shape()
            )));
        }
        if heads == 0 || dq % heads != 0 || dv % heads != 0 {
            return Err(NnError::Config(format!(
                "attention: widths {dq}/{dv} not divisible by {heads} heads"
            )));
        }
        let (hd, hv) = (dq / heads, dv / heads);
        let scale = 1.0 / (hd as f64).sqrt();
        let mut weights = vec![0.0; b * heads * lq * lk];
        let mut out = vec![0.0; b * lq * dv];
        for bi in 0..b {
            for h in 0..heads {
                let w = &mut weights[(bi * heads + h) * lq * lk..(bi * heads + h + 1) * lq * lk];
                gemm(
                    lq,
                    hd,
                    lk,
                    scale,
                    &tq.data()[bi * lq * dq + h * hd..],
                    View { rs: dq, cs: 1 },
                    &tk.data()[bi * lk * dk + h * hd..],
                    View { rs: 1, cs: dk },
                    0.0,
                    w,
                    View::row_major(lk),
                );
                for row in w.chunks_mut(lk) {
                    softmax_in_place(row);
                }
                gemm(
                    lq,
                    lk,
                    hv,
                    1.0,
                    w,
                    View::row_major(lk),
                    &tv.data()[bi * lk * dv + h * hv..],
                    View { rs: dv, cs: 1 },
                    0.0,
                    &mut out[bi * lq * dv + h * hv..],
                    View { rs: dv, cs: 1 },
                );
            }
        }
        let out = Tensor::new(&[b, lq, dv], out)?;
        self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                heads,
                scale,
                weights,
            },
            "attention",
        )
    }

    pub fn sum(&mut self, x: Var) -> Result<Var, NnError> {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), "sum")
    }

    pub fn mean(&mut self, x: Var) -> Result<Var, NnError> {
        let t = self.value(x);
        let s = t.data().iter().sum::<f64>() / t.len().max(1) as f64;
        self.push(Tensor::scalar(s), Op::Mean(x), "mean")
    }

    /// Mean binary cross-entropy of probabilities `p` against 0/1 targets,
    /// with `p` clamped to `[eps, 1 - eps]`.
    pub fn bce(&mut self, p: Var, targets: &[f64], eps: f64) -> Result<Var, NnError> {
        let tp = self.value(p);
        if tp.len() != targets.len() || targets.is_empty() {
            return Err(shape_err(format!(
                "bce: {} probabilities vs {} targets",
                tp.len(),
                targets.len()
            )));
        }
        let n = targets.len() as f64;
        let loss = tp
            .data()
            .iter()
            .zip(targets)
            .map(|(&pv, &y)| {
                let pc = pv.clamp(eps, 1.0 - eps);
                -(y * pc.ln() + (1.0 - y) * (1.0 - pc).ln())
            })
            .sum::<f64>()
            / n;
        self.push(
            Tensor::scalar(loss),
            Op::Bce {
                p,
                targets: targets.to_vec(),
                eps,
            },
            "bce",
        )
    }

    /// Reverse pass from a scalar node. Every node that depends on a
    /// `requires_grad` leaf gets a gradient.
    pub fn backward(&self, loss: Var) -> Result<Gradients, NnError> {
        if self.value(loss).len() != 1 {
            return Err(NnError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(Tensor::full(self.shape(loss), 1.0));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn acc<'a>(&self, grads: &'a mut [Option<Tensor>], v: Var) -> Option<&'a mut [f64]> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let slot = &mut grads[v.0];
        if slot.is_none() {
            *slot = Some(Tensor::zeros(self.shape(v)));
        }
        slot.as_mut().map(|t| t.data_mut())
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<(), NnError> {
        let node = &self.nodes[i];
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(d) = self.acc(grads, v) {
                        d.iter_mut().zip(gd).for_each(|(x, y)| *x += y);
                    }
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if let Some(d) = self.acc(grads, *a) {
                    for j in 0..d.len() {
                        d[j] += gd[j] * vb[j];
                    }
                }
                if let Some(d) = self.acc(grads, *b) {
                    for j in 0..d.len() {
                        d[j] += gd[j] * va[j];
                    }
                }
            }
            Op::Scale(a, f) => {
                if let Some(d) = self.acc(grads, *a) {
                    d.iter_mut().zip(gd).for_each(|(x, y)| *x += f * y);
                }
            }
            Op::AddBias { x, b } => {
                if let Some(d) = self.acc(grads, *x) {
                    d.iter_mut().zip(gd).for_each(|(x, y)| *x += y);
                }
                let c = self.value(*b).len();
                if let Some(d) = self.acc(grads, *b) {
                    for row in gd.chunks(c) {
                        d.iter_mut().zip(row).for_each(|(x, y)| *x += y);
                    }
                }
            }
            Op::MulChannel { x, a } => {
                let (vx, va) = (self.value(*x).data(), self.value(*a).data());
                let c = va.len();
                if let Some(d) = self.acc(grads, *x) {
                    for (j, dv) in d.iter_mut().enumerate() {
                        *dv += gd[j] * va[j % c];
                    }
                }
                if let Some(d) = self.acc(grads, *a) {
                    for (j, gv) in gd.iter().enumerate() {
                        d[j % c] += gv * vx[j];
                    }
                }
            }
            Op::Linear { x, w, b } => {
                let (tx, tw) = (self.value(*x), self.value(*w));
                let (cin, cout) = (tw.shape()[0], tw.shape()[1]);
                let rows = tx.rows();
                if let Some(d) = self.acc(grads, *x) {
                    gemm(
                        rows,
                        cout,
                        cin,
                        1.0,
                        gd,
                        View::row_major(cout),
                        tw.data(),
                        View::transposed(cout),
                        1.0,
                        d,
                        View::row_major(cin),
                    );
                }
                if let Some(d) = self.acc(grads, *w) {
                    gemm(
                        cin,
                        rows,
                        cout,
                        1.0,
                        tx.data(),
                        View::transposed(cin),
                        gd,
                        View::row_major(cout),
                        1.0,
                        d,
                        View::row_major(cout),
                    );
                }
                if let Some(b) = b {
                    if let Some(d) = self.acc(grads, *b) {
                        for row in gd.chunks(cout) {
                            d.iter_mut().zip(row).for_each(|(x, y)| *x += y);
                        }
                    }
                }
            }
            Op::Conv1d {
                x,
                w,
                b,
                dilation,
                pad_left,
            } => {
                let (tx, tw) = (self.value(*x), self.value(*w));
                let (bsz, len, cin) = seq_dims(tx, "conv1d")?;
                let (kernel, cout) = (tw.shape()[0], tw.shape()[2]);
                if let Some(d) = self.acc(grads, *x) {
                    for bi in 0..bsz {
                        for k in 0..kernel {
                            let Some((t0, t1, shift)) = tap_range(len, k * dilation, *pad_left) else {
                                continue;
                            };
                            let src = ((bi * len) as isize + t0 as isize + shift) as usize;
                            gemm(
                                t1 - t0,
                                cout,
                                cin,
                                1.0,
                                &gd[(bi * len + t0) * cout..],
                                View::row_major(cout),
                                &tw.data()[k * cin * cout..],
                                View::transposed(cout),
                                1.0,
                                &mut d[src * cin..],
                                View::row_major(cin),
                            );
                        }
                    }
                }
                if let Some(d) = self.acc(grads, *w) {
                    for bi in 0..bsz {
                        for k in 0..kernel {
                            let Some((t0, t1, shift)) = tap_range(len, k * dilation, *pad_left) else {
                                continue;
                            };
                            let src = ((bi * len) as isize + t0 as isize + shift) as usize;
                            gemm(
                                cin,
                                t1 - t0,
                                cout,
                                1.0,
                                &tx.data()[src * cin..],
                                View::transposed(cin),
                                &gd[(bi * len + t0) * cout..],
                                View::row_major(cout),
                                1.0,
                                &mut d[k * cin * cout..],
                                View::row_major(cout),
                            );
                        }
                    }
                }
                if let Some(b) = b {
                    if let Some(d) = self.acc(grads, *b) {
                        for row in gd.chunks(cout) {
                            d.iter_mut().zip(row).for_each(|(x, y)| *x += y);
                        }
                    }
                }
            }
            Op::Depthwise {
                x,
                w,
                b,
                dilation,
                pad_left,
            } => {
                let (tx, tw) = (self.value(*x), self.value(*w));
                let (bsz, len, c) = seq_dims(tx, "depthwise_conv1d")?;
                let kernel = tw.shape()[0];
                let (xd, wd) = (tx.data(), tw.data());
                if let Some(d) = self.acc(grads, *x) {
                    for bi in 0..bsz {
                        for k in 0..kernel {
                            let Some((t0, t1, shift)) = tap_range(len, k * dilation, *pad_left) else {
                                continue;
                            };
                            for t in t0..t1 {
                                let src = ((bi * len) as isize + t as isize + shift) as usize * c;
                                let dst = (bi * len + t) * c;
                                for ch in 0..c {
                                    d[src + ch] += gd[dst + ch] * wd[k * c + ch];
                                }
                            }
                        }
                    }
                }
                if let Some(d) = self.acc(grads, *w) {
                    for bi in 0..bsz {
                        for k in 0..kernel {
                            let Some((t0, t1, shift)) = tap_range(len, k * dilation, *pad_left) else {
                                continue;
                            };
                            for t in t0..t1 {
                                let src = ((bi * len) as isize + t as isize + shift) as usize * c;
                                let dst = (bi * len + t) * c;
                                for ch in 0..c {
                                    d[k * c + ch] += gd[dst + ch] * xd[src + ch];
                                }
                            }
                        }
                    }
                }
                if let Some(b) = b {
                    if let Some(d) = self.acc(grads, *b) {
                        for row in gd.chunks(c) {
                            d.iter_mut().zip(row).for_each(|(x, y)| *x += y);
                        }
                    }
                }
            }
            Op::Act { x, kind } => {
                let xv = self.value(*x).data();
                let yv = node.value.data();
                if let Some(d) = self.acc(grads, *x) {
                    for j in 0..d.len() {
                        let local = match kind {
                            Activation::Gelu => gelu_grad(xv[j]),
                            Activation::Sigmoid => yv[j] * (1.0 - yv[j]),
                            Activation::Relu => {
                                if xv[j] > 0.0 {
                                    1.0
                                } else {
                                    0.0
                                }
                            }
                        };
                        d[j] += gd[j] * local;
                    }
                }
            }
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                xhat,
                rstd,
            } => {
                let c = self.value(*x).last_dim();
                let gs = c / groups;
                let gam = self.value(*gamma).data();
                if let Some(d) = self.acc(grads, *gamma) {
                    for (grow, hrow) in gd.chunks(c).zip(xhat.chunks(c)) {
                        for ch in 0..c {
                            d[ch] += grow[ch] * hrow[ch];
                        }
                    }
                }
                if let Some(d) = self.acc(grads, *beta) {
                    for grow in gd.chunks(c) {
                        d.iter_mut().zip(grow).for_each(|(x, y)| *x += y);
                    }
                }
                if let Some(d) = self.acc(grads, *x) {
                    let mut dxhat = vec![0.0; gs];
                    for (set, r) in rstd.iter().enumerate() {
                        let base = set * gs;
                        let ch0 = (set % groups) * gs;
                        for j in 0..gs {
                            dxhat[j] = gd[base + j] * gam[ch0 + j];
                        }
                        let m1 = dxhat.iter().sum::<f64>() / gs as f64;
                        let m2 = (0..gs).map(|j| dxhat[j] * xhat[base + j]).sum::<f64>() / gs as f64;
                        for j in 0..gs {
                            d[base + j] += r * (dxhat[j] - m1 - xhat[base + j] * m2);
                        }
                    }
                }
            }
            Op::BatchNormTrain {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let c = self.value(*x).last_dim();
                let n = self.value(*x).rows();
                let gam = self.value(*gamma).data();
                if let Some(d) = self.acc(grads, *gamma) {
                    for (j, gv) in gd.iter().enumerate() {
                        d[j % c] += gv * xhat[j];
                    }
                }
                if let Some(d) = self.acc(grads, *beta) {
                    for (j, gv) in gd.iter().enumerate() {
                        d[j % c] += gv;
                    }
                }
                if let Some(d) = self.acc(grads, *x) {
                    let mut m1 = vec![0.0; c];
                    let mut m2 = vec![0.0; c];
                    for (j, gv) in gd.iter().enumerate() {
                        let ch = j % c;
                        let dh = gv * gam[ch];
                        m1[ch] += dh / n as f64;
                        m2[ch] += dh * xhat[j] / n as f64;
                    }
                    for (j, gv) in gd.iter().enumerate() {
                        let ch = j % c;
                        let dh = gv * gam[ch];
                        d[j] += rstd[ch] * (dh - m1[ch] - xhat[j] * m2[ch]);
                    }
                }
            }
            Op::BatchNormEval {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let c = self.value(*x).last_dim();
                let gam = self.value(*gamma).data();
                if let Some(d) = self.acc(grads, *gamma) {
                    for (j, gv) in gd.iter().enumerate() {
                        d[j % c] += gv * xhat[j];
                    }
                }
                if let Some(d) = self.acc(grads, *beta) {
                    for (j, gv) in gd.iter().enumerate() {
                        d[j % c] += gv;
                    }
                }
                if let Some(d) = self.acc(grads, *x) {
                    for (j, gv) in gd.iter().enumerate() {
                        d[j] += gv * gam[j % c] * rstd[j % c];
                    }
                }
            }
            Op::Concat { parts } => {
                let total = node.value.last_dim();
                let rows = node.value.rows();
                let mut offset = 0;
                for p in parts {
                    let w = self.value(*p).last_dim();
                    if let Some(d) = self.acc(grads, *p) {
                        for r in 0..rows {
                            for j in 0..w {
                                d[r * w + j] += gd[r * total + offset + j];
                            }
                        }
                    }
                    offset += w;
                }
            }
            Op::GlobalAvg { x } => {
                let (bsz, len, c) = seq_dims(self.value(*x), "pool")?;
                if let Some(d) = self.acc(grads, *x) {
                    for bi in 0..bsz {
                        for t in 0..len {
                            for ch in 0..c {
                                d[(bi * len + t) * c + ch] += gd[bi * c + ch] / len as f64;
                            }
                        }
                    }
                }
            }
            Op::GlobalMax { x, argmax } => {
                let (_, len, c) = seq_dims(self.value(*x), "pool")?;
                if let Some(d) = self.acc(grads, *x) {
                    for (j, &t) in argmax.iter().enumerate() {
                        let (bi, ch) = (j / c, j % c);
                        d[(bi * len + t) * c + ch] += gd[j];
                    }
                }
            }
            Op::AdaptiveAvg { x, bins } => {
                let (bsz, len, c) = seq_dims(self.value(*x), "pool")?;
                let target = bins.len();
                if let Some(d) = self.acc(grads, *x) {
                    for bi in 0..bsz {
                        for (j, &(s, e)) in bins.iter().enumerate() {
                            let n = (e - s) as f64;
                            for t in s..e {
                                for ch in 0..c {
                                    d[(bi * len + t) * c + ch] += gd[(bi * target + j) * c + ch] / n;
                                }
                            }
                        }
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                scale,
                weights,
            } => self.attention_backward(gd, *q, *k, *v, *heads, *scale, weights, grads)?,
            Op::Sum(x) => {
                if let Some(d) = self.acc(grads, *x) {
                    d.iter_mut().for_each(|v| *v += gd[0]);
                }
            }
            Op::Mean(x) => {
                let n = self.value(*x).len().max(1) as f64;
                if let Some(d) = self.acc(grads, *x) {
                    d.iter_mut().for_each(|v| *v += gd[0] / n);
                }
            }
            Op::Bce { p, targets, eps } => {
                let pv = self.value(*p).data();
                let n = targets.len() as f64;
                if let Some(d) = self.acc(grads, *p) {
                    for j in 0..d.len() {
                        let (pj, y) = (pv[j], targets[j]);
                        if pj < *eps || pj > 1.0 - eps {
                            continue;
                        }
                        d[j] += gd[0] * (-y / pj + (1.0 - y) / (1.0 - pj)) / n;
                    }
                }
            }
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        gd: &[f64],
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        scale: f64,
        weights: &[f64],
        grads: &mut [Option<Tensor>],
    ) -> Result<(), NnError> {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        let (b, lq, dq) = seq_dims(tq, "attention")?;
        let (_, lk, dv) = seq_dims(tv, "attention")?;
        let dk = dq;
        let (hd, hv) = (dq / heads, dv / heads);
        let mut dp = vec![0.0; lq * lk];
        // Fresh delta buffers; q, k and v may be the same node.
        let fresh = |var: Var| self.requires_grad(var).then(|| vec![0.0; self.value(var).len()]);
        let mut gq = fresh(q);
        let mut gk = fresh(k);
        let mut gv = fresh(v);
        for bi in 0..b {
            for h in 0..heads {
                let w = &weights[(bi * heads + h) * lq * lk..(bi * heads + h + 1) * lq * lk];
                let go = &gd[bi * lq * dv + h * hv..];
                if let Some(gvd) = gv.as_mut() {
                    gemm(
                        lk,
                        lq,
                        hv,
                        1.0,
                        w,
                        View::transposed(lk),
                        go,
                        View { rs: dv, cs: 1 },
                        1.0,
                        &mut gvd[bi * lk * dv + h * hv..],
                        View { rs: dv, cs: 1 },
                    );
                }
                if gq.is_none() && gk.is_none() {
                    continue;
                }
                gemm(
                    lq,
                    hv,
                    lk,
                    1.0,
                    go,
                    View { rs: dv, cs: 1 },
                    &tv.data()[bi * lk * dv + h * hv..],
                    View { rs: 1, cs: dv },
                    0.0,
                    &mut dp,
                    View::row_major(lk),
                );
                for (prow, wrow) in dp.chunks_mut(lk).zip(w.chunks(lk)) {
                    let dot: f64 = prow.iter().zip(wrow).map(|(a, b)| a * b).sum();
                    for (pv, wv) in prow.iter_mut().zip(wrow) {
                        *pv = wv * (*pv - dot);
                    }
                }
                if let Some(gqd) = gq.as_mut() {
                    gemm(
                        lq,
                        lk,
                        hd,
                        scale,
                        &dp,
                        View::row_major(lk),
                        &tk.data()[bi * lk * dk + h * hd..],
                        View { rs: dk, cs: 1 },
                        1.0,
                        &mut gqd[bi * lq * dq + h * hd..],
                        View { rs: dq, cs: 1 },
                    );
                }
                if let Some(gkd) = gk.as_mut() {
                    gemm(
                        lk,
                        lq,
                        hd,
                        scale,
                        &dp,
                        View::transposed(lk),
                        &tq.data()[bi * lq * dq + h * hd..],
                        View { rs: dq, cs: 1 },
                        1.0,
                        &mut gkd[bi * lk * dk + h * hd..],
                        View { rs: dk, cs: 1 },
                    );
                }
            }
        }
        for (var, buf) in [(q, gq), (k, gk), (v, gv)] {
            if let (Some(buf), Some(d)) = (buf, self.acc(grads, var)) {
                d.iter_mut().zip(&buf).for_each(|(x, y)| *x += y);
            }
        }
        Ok(())
    }
}

/// Output range `[t0, t1)` for which a conv tap at offset `tap - pad_left`
/// reads inside the sequence, together with the signed read shift.
fn tap_range(len: usize, tap: usize, pad_left: usize) -> Option<(usize, usize, isize)> {
    let shift = tap as isize - pad_left as isize;
    let t0 = (-shift).max(0) as usize;
    let t1 = (len as isize - shift).min(len as isize);
    if t1 <= t0 as isize {
        None
    } else {
        Some((t0, t1 as usize, shift))
    }
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    row.iter_mut().for_each(|v| *v /= total);
}
