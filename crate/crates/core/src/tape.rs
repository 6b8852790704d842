//! Define-by-run reverse-mode differentiation.
//!
//! A [`Tape`] is built fresh for every forward pass. Each op appends one node
//! whose inputs already exist on the tape, so node order is a topological
//! order and [`Tape::backward`] simply walks it in reverse.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use libm::{exp, log};

use crate::error::{dim_err, Error, Result};
use crate::kernels::{self, ConvGeom};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    /// Zero padding of `k / 2` on every side (odd kernels only).
    Same,
    Valid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
}

/// Batch normalization hyper-parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatchNormConfig {
    pub eps: f64,
    pub momentum: f64,
}

impl Default for BatchNormConfig {
    fn default() -> Self {
        Self { eps: 1e-5, momentum: 0.1 }
    }
}

/// Whether batchnorm uses batch statistics (and updates the running ones) or
/// the stored running statistics.
#[derive(Debug)]
pub enum BatchNormMode<'a> {
    Train { running_mean: &'a mut [f64], running_var: &'a mut [f64] },
    Eval { running_mean: &'a [f64], running_var: &'a [f64] },
}

/// Probability clamp applied before taking logs in the cross-entropy ops.
pub const PROB_EPS: f64 = 1e-12;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Param,
    Conv2d { input: Var, weight: Var, bias: Var, geom: ConvGeom },
    BatchNorm { input: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64>, train: bool },
    Relu(Var),
    Sigmoid(Var),
    Softmax(Var),
    GlobalAvgPool(Var),
    Linear { input: Var, weight: Var, bias: Option<Var> },
    MaskMul { feature: Var, mask: Var },
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddN(Vec<Var>),
    SumAll(Var),
    ScaleRows { x: Var, s: Var },
    Column { x: Var, j: usize },
    StackColumns(Vec<Var>),
    RowDot { x: Var, w: Var },
    Bce { p: Var, labels: Vec<f64>, w_pos: f64, w_neg: f64 },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Param => "param",
            Op::Conv2d { .. } => "conv2d",
            Op::BatchNorm { .. } => "batchnorm2d",
            Op::Relu(_) => "relu",
            Op::Sigmoid(_) => "sigmoid",
            Op::Softmax(_) => "softmax",
            Op::GlobalAvgPool(_) => "global_avg_pool",
            Op::Linear { .. } => "linear",
            Op::MaskMul { .. } => "mask_mul",
            Op::Add(..) => "add",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddN(_) => "add_n",
            Op::SumAll(_) => "sum_all",
            Op::ScaleRows { .. } => "scale_rows",
            Op::Column { .. } => "column",
            Op::StackColumns(_) => "stack_columns",
            Op::RowDot { .. } => "row_dot",
            Op::Bce { .. } => "bce",
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Deliberately wrong backward rule, used as a negative control for
/// gradient checking.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BackwardFault {
    pub op: &'static str,
    pub scale: f64,
}

/// Recorded operations of one forward pass.
#[derive(Debug, Clone, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    param_vars: BTreeMap<ParamId, Var>,
    fault: Option<BackwardFault>,
}

/// Gradients of one backward pass, indexed by [`Var`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&[f64]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }
}

fn check_finite(op: &'static str, data: &[f64]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + exp(-x))
    } else {
        let e = exp(x);
        e / (1.0 + e)
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, delta: &[f64]) {
    match slot {
        Some(g) => g.iter_mut().zip(delta).for_each(|(a, b)| *a += b),
        None => *slot = Some(delta.to_vec()),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Makes every later backward pass through ops named `fault.op` scale
    /// the upstream gradient by `fault.scale`.
    pub fn inject_fault(&mut self, fault: BackwardFault) {
        self.fault = Some(fault);
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Result<Var> {
        check_finite(op.name(), value.data())?;
        let requires_grad = match &op {
            Op::Leaf => false,
            Op::Param => true,
            other => self.inputs(other).iter().any(|v| self.nodes[v.0].requires_grad),
        };
        self.nodes.push(Node { value, op, requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn inputs(&self, op: &Op) -> Vec<Var> {
        match op {
            Op::Leaf | Op::Param => vec![],
            Op::Conv2d { input, weight, bias, .. } => vec![*input, *weight, *bias],
            Op::BatchNorm { input, gamma, beta, .. } => vec![*input, *gamma, *beta],
            Op::Relu(x) | Op::Sigmoid(x) | Op::Softmax(x) | Op::GlobalAvgPool(x) | Op::SumAll(x) => vec![*x],
            Op::Scale(x, _) | Op::Column { x, .. } => vec![*x],
            Op::Linear { input, weight, bias } => {
                let mut v = vec![*input, *weight];
                v.extend(bias.iter().copied());
                v
            }
            Op::MaskMul { feature, mask } => vec![*feature, *mask],
            Op::Add(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::AddN(xs) | Op::StackColumns(xs) => xs.clone(),
            Op::ScaleRows { x, s } => vec![*x, *s],
            Op::RowDot { x, w } => vec![*x, *w],
            Op::Bce { p, .. } => vec![*p],
        }
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad: false });
        Var(self.nodes.len() - 1)
    }

    /// Free-standing differentiable input, not owned by a [`ParamStore`].
    pub fn variable(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad: true });
        Var(self.nodes.len() - 1)
    }

    /// Loads a parameter onto the tape. Repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let value = store.value(id).clone();
        self.nodes.push(Node { value, op: Op::Param, requires_grad: true });
        let v = Var(self.nodes.len() - 1);
        self.param_vars.insert(id, v);
        v
    }

    pub fn param_by_name(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        let id = store.id(name)?;
        Ok(self.param(store, id))
    }

    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var, stride: usize, padding: Padding) -> Result<Var> {
        let xs = self.shape(input);
        let ws = self.shape(weight);
        let bs = self.shape(bias);
        if xs.len() != 4 || ws.len() != 4 {
            return Err(dim_err("conv2d", format!("input {xs:?}, weight {ws:?} must be rank 4")));
        }
        let (batch, c_in, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (c_out, wc_in, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
        if wc_in != c_in {
            return Err(dim_err("conv2d", format!("input has {c_in} channels, weight expects {wc_in}")));
        }
        if bs != [c_out] {
            return Err(dim_err("conv2d", format!("bias {bs:?} for {c_out} output channels")));
        }
        if stride == 0 {
            return Err(dim_err("conv2d", "stride must be positive".into()));
        }
        let pad = match padding {
            Padding::Same => {
                if kh % 2 == 0 || kw % 2 == 0 || kh != kw {
                    return Err(dim_err("conv2d", format!("same padding needs an odd square kernel, got {kh}x{kw}")));
                }
                kh / 2
            }
            Padding::Valid => 0,
        };
        if h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(dim_err("conv2d", format!("kernel {kh}x{kw} larger than input {h}x{w}")));
        }
        let geom = ConvGeom {
            batch,
            c_in,
            h,
            w,
            c_out,
            kh,
            kw,
            stride,
            pad,
            h_out: (h + 2 * pad - kh) / stride + 1,
            w_out: (w + 2 * pad - kw) / stride + 1,
        };
        let out = kernels::conv2d_forward(&geom, self.value(input).data(), self.value(weight).data(), self.value(bias).data());
        let value = Tensor::from_parts(vec![batch, c_out, geom.h_out, geom.w_out], out);
        self.push(value, Op::Conv2d { input, weight, bias, geom })
    }

    pub fn batchnorm2d(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        mode: BatchNormMode<'_>,
        config: BatchNormConfig,
    ) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        if xs.len() != 4 {
            return Err(dim_err("batchnorm2d", format!("input {xs:?} must be rank 4")));
        }
        let (batch, channels, plane) = (xs[0], xs[1], xs[2] * xs[3]);
        if self.shape(gamma) != [channels] || self.shape(beta) != [channels] {
            return Err(dim_err("batchnorm2d", format!("gamma/beta must have {channels} entries")));
        }
        let x = self.value(input).data();
        let (xhat, inv_std, train) = match mode {
            BatchNormMode::Train { running_mean, running_var } => {
                let count = batch * plane;
                if count < 2 {
                    return Err(Error::DegenerateBatch(count));
                }
                if running_mean.len() != channels || running_var.len() != channels {
                    return Err(dim_err("batchnorm2d", "running statistics length".into()));
                }
                let (mean, var) = kernels::channel_moments(x, batch, channels, plane);
                let (xhat, inv_std) = kernels::normalize(x, batch, channels, plane, &mean, &var, config.eps);
                let unbias = count as f64 / (count as f64 - 1.0);
                for c in 0..channels {
                    running_mean[c] = (1.0 - config.momentum) * running_mean[c] + config.momentum * mean[c];
                    running_var[c] = (1.0 - config.momentum) * running_var[c] + config.momentum * var[c] * unbias;
                }
                (xhat, inv_std, true)
            }
            BatchNormMode::Eval { running_mean, running_var } => {
                if running_mean.len() != channels || running_var.len() != channels {
                    return Err(dim_err("batchnorm2d", "running statistics length".into()));
                }
                let (xhat, inv_std) = kernels::normalize(x, batch, channels, plane, running_mean, running_var, config.eps);
                (xhat, inv_std, false)
            }
        };
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut out = vec![0.0; xhat.len()];
        for b in 0..batch {
            for c in 0..channels {
                let off = (b * channels + c) * plane;
                for (o, &xh) in out[off..off + plane].iter_mut().zip(&xhat[off..off + plane]) {
                    *o = g[c] * xh + bt[c];
                }
            }
        }
        let value = Tensor::from_parts(xs, out);
        self.push(value, Op::BatchNorm { input, gamma, beta, xhat, inv_std, train })
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Result<Var> {
        match kind {
            Activation::Relu => self.relu(x),
            Activation::Sigmoid => self.sigmoid(x),
        }
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let data = v.data().iter().map(|&a| if a > 0.0 { a } else { 0.0 }).collect();
        let value = Tensor::from_parts(v.shape().to_vec(), data);
        self.push(value, Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let data = v.data().iter().map(|&a| sigmoid(a)).collect();
        let value = Tensor::from_parts(v.shape().to_vec(), data);
        self.push(value, Op::Sigmoid(x))
    }

    /// Softmax along the last axis of a rank-1 or rank-2 tensor, with the
    /// row maximum subtracted before exponentiating.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let shape = v.shape().to_vec();
        if shape.len() > 2 {
            return Err(dim_err("softmax", format!("expected rank 1 or 2, got {shape:?}")));
        }
        let m = *shape.last().unwrap_or(&1);
        let mut out = vec![0.0; v.numel()];
        for (row_in, row_out) in v.data().chunks(m).zip(out.chunks_mut(m)) {
            let max = row_in.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for (o, &a) in row_out.iter_mut().zip(row_in) {
                *o = exp(a - max);
                total += *o;
            }
            row_out.iter_mut().for_each(|o| *o /= total);
        }
        self.push(Tensor::from_parts(shape, out), Op::Softmax(x))
    }

    /// `[B, C, H, W] -> [B, C]`, spatial mean.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 {
            return Err(dim_err("global_avg_pool", format!("input {xs:?} must be rank 4")));
        }
        let plane = xs[2] * xs[3];
        let data = self.value(x).data().chunks(plane).map(|p| p.iter().sum::<f64>() / plane as f64).collect();
        self.push(Tensor::from_parts(vec![xs[0], xs[1]], data), Op::GlobalAvgPool(x))
    }

    /// Affine map `y = x W^T + b` for `x` of shape `[in]` or `[B, in]` and
    /// `W` of shape `[out, in]`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        let ws = self.shape(weight).to_vec();
        if ws.len() != 2 || xs.is_empty() || xs.len() > 2 {
            return Err(dim_err("linear", format!("input {xs:?}, weight {ws:?}")));
        }
        let (rows, fan_in) = if xs.len() == 1 { (1, xs[0]) } else { (xs[0], xs[1]) };
        let (fan_out, w_in) = (ws[0], ws[1]);
        if w_in != fan_in {
            return Err(dim_err("linear", format!("input width {fan_in} but weight expects {w_in}")));
        }
        if let Some(b) = bias {
            if self.shape(b) != [fan_out] {
                return Err(dim_err("linear", format!("bias {:?} for {fan_out} outputs", self.shape(b))));
            }
        }
        let x = self.value(input).data();
        let w = self.value(weight).data();
        let mut out = vec![0.0; rows * fan_out];
        for r in 0..rows {
            let xr = &x[r * fan_in..][..fan_in];
            for o in 0..fan_out {
                let wr = &w[o * fan_in..][..fan_in];
                out[r * fan_out + o] = xr.iter().zip(wr).map(|(a, b)| a * b).sum::<f64>();
            }
        }
        if let Some(b) = bias {
            let bv = self.value(b).data();
            for row in out.chunks_mut(fan_out) {
                row.iter_mut().zip(bv).for_each(|(o, b)| *o += b);
            }
        }
        let shape = if xs.len() == 1 { vec![fan_out] } else { vec![rows, fan_out] };
        self.push(Tensor::from_parts(shape, out), Op::Linear { input, weight, bias })
    }

    /// `F[B, C, H, W] * M[B, 1, H, W]`, mask broadcast across channels.
    pub fn mask_mul(&mut self, feature: Var, mask: Var) -> Result<Var> {
        let fs = self.shape(feature).to_vec();
        let ms = self.shape(mask);
        if fs.len() != 4 || ms.len() != 4 || ms[0] != fs[0] || ms[1] != 1 || ms[2] != fs[2] || ms[3] != fs[3] {
            return Err(dim_err("mask_mul", format!("feature {fs:?}, mask {ms:?}")));
        }
        let (batch, channels, plane) = (fs[0], fs[1], fs[2] * fs[3]);
        let f = self.value(feature).data();
        let m = self.value(mask).data();
        let mut out = vec![0.0; f.len()];
        for b in 0..batch {
            let mb = &m[b * plane..][..plane];
            for c in 0..channels {
                let off = (b * channels + c) * plane;
                for ((o, &fv), &mv) in out[off..off + plane].iter_mut().zip(&f[off..off + plane]).zip(mb) {
                    *o = fv * mv;
                }
            }
        }
        self.push(Tensor::from_parts(fs, out), Op::MaskMul { feature, mask })
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(dim_err(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x + y).collect();
        let value = Tensor::from_parts(self.shape(a).to_vec(), data);
        self.push(value, Op::Add(a, b))
    }

    /// Elementwise product of equally shaped tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x * y).collect();
        let value = Tensor::from_parts(self.shape(a).to_vec(), data);
        self.push(value, Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let v = self.value(x);
        let value = Tensor::from_parts(v.shape().to_vec(), v.data().iter().map(|a| a * factor).collect());
        self.push(value, Op::Scale(x, factor))
    }

    /// Sum of equally shaped tensors, accumulated in list order.
    pub fn add_n(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs.first().ok_or_else(|| dim_err("add_n", "empty input list".into()))?;
        let mut data = self.value(first).data().to_vec();
        for &x in &xs[1..] {
            self.same_shape("add_n", first, x)?;
            data.iter_mut().zip(self.value(x).data()).for_each(|(a, b)| *a += b);
        }
        let value = Tensor::from_parts(self.shape(first).to_vec(), data);
        self.push(value, Op::AddN(xs.to_vec()))
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum::<f64>();
        self.push(Tensor::scalar(s), Op::SumAll(x))
    }

    /// `x[B, D] * s[B]`, each row scaled by its own factor.
    pub fn scale_rows(&mut self, x: Var, s: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 2 || self.shape(s) != [xs[0]] {
            return Err(dim_err("scale_rows", format!("x {xs:?}, s {:?}", self.shape(s))));
        }
        let d = xs[1];
        let sv = self.value(s).data();
        let data = self.value(x).data().chunks(d).zip(sv).flat_map(|(row, &f)| row.iter().map(move |a| a * f)).collect();
        self.push(Tensor::from_parts(xs, data), Op::ScaleRows { x, s })
    }

    /// Column `j` of a `[B, m]` tensor, as `[B]`.
    pub fn column(&mut self, x: Var, j: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 2 || j >= xs[1] {
            return Err(dim_err("column", format!("column {j} of {xs:?}")));
        }
        let data = self.value(x).data().chunks(xs[1]).map(|row| row[j]).collect();
        self.push(Tensor::from_parts(vec![xs[0]], data), Op::Column { x, j })
    }

    /// Stacks `m` tensors of shape `[B]` into `[B, m]`.
    pub fn stack_columns(&mut self, cols: &[Var]) -> Result<Var> {
        let first = *cols.first().ok_or_else(|| dim_err("stack_columns", "empty input list".into()))?;
        let rows = self.shape(first).to_vec();
        if rows.len() != 1 {
            return Err(dim_err("stack_columns", format!("columns must be rank 1, got {rows:?}")));
        }
        for &c in cols {
            self.same_shape("stack_columns", first, c)?;
        }
        let (b, m) = (rows[0], cols.len());
        let mut out = vec![0.0; b * m];
        for (j, &c) in cols.iter().enumerate() {
            for (r, &v) in self.value(c).data().iter().enumerate() {
                out[r * m + j] = v;
            }
        }
        self.push(Tensor::from_parts(vec![b, m], out), Op::StackColumns(cols.to_vec()))
    }

    /// Row-wise dot product `x[B, D] . w[D] -> [B]`.
    pub fn row_dot(&mut self, x: Var, w: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 2 || self.shape(w) != [xs[1]] {
            return Err(dim_err("row_dot", format!("x {xs:?}, w {:?}", self.shape(w))));
        }
        let wv = self.value(w).data();
        let data = self.value(x).data().chunks(xs[1]).map(|row| row.iter().zip(wv).map(|(a, b)| a * b).sum::<f64>()).collect();
        self.push(Tensor::from_parts(vec![xs[0]], data), Op::RowDot { x, w })
    }

    /// Batch mean of the (optionally class-weighted) binary cross-entropy
    /// `-w_pos * y * ln p - w_neg * (1 - y) * ln(1 - p)` with `p` clamped to
    /// `[PROB_EPS, 1 - PROB_EPS]`.
    pub fn bce_mean(&mut self, p: Var, labels: &[f64], w_pos: f64, w_neg: f64) -> Result<Var> {
        if self.shape(p) != [labels.len()] {
            return Err(dim_err("bce", format!("probabilities {:?} for {} labels", self.shape(p), labels.len())));
        }
        let n = labels.len() as f64;
        let loss = self
            .value(p)
            .data()
            .iter()
            .zip(labels)
            .map(|(&pv, &y)| {
                let pc = pv.clamp(PROB_EPS, 1.0 - PROB_EPS);
                -w_pos * y * log(pc) - w_neg * (1.0 - y) * log(1.0 - pc)
            })
            .sum::<f64>()
            / n;
        self.push(Tensor::scalar(loss), Op::Bce { p, labels: labels.to_vec(), w_pos, w_neg })
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(Error::NotScalar(lv.shape().to_vec()));
        }
        if !self.nodes[loss.0].requires_grad {
            return Err(Error::Detached);
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(mut upstream) = grads[idx].take() else { continue };
            if let Some(fault) = self.fault {
                if fault.op == node.op.name() {
                    upstream.iter_mut().for_each(|g| *g *= fault.scale);
                }
            }
            self.backward_node(&node.op, &node.value, &upstream, &mut grads);
            grads[idx] = Some(upstream);
        }
        Ok(Gradients { grads })
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backward_node(&self, op: &Op, out: &Tensor, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match op {
            Op::Leaf | Op::Param => {}
            Op::Conv2d { input, weight, bias, geom } => {
                let (d_in, d_w, d_b) =
                    kernels::conv2d_backward(geom, self.value(*input).data(), self.value(*weight).data(), g, self.needs(*input));
                if let Some(d_in) = d_in {
                    accumulate(&mut grads[input.0], &d_in);
                }
                if self.needs(*weight) {
                    accumulate(&mut grads[weight.0], &d_w);
                }
                if self.needs(*bias) {
                    accumulate(&mut grads[bias.0], &d_b);
                }
            }
            Op::BatchNorm { input, gamma, beta, xhat, inv_std, train } => {
                let s = out.shape();
                let (batch, channels, plane) = (s[0], s[1], s[2] * s[3]);
                let gv = self.value(*gamma).data();
                let mut d_gamma = vec![0.0; channels];
                let mut d_beta = vec![0.0; channels];
                for b in 0..batch {
                    for c in 0..channels {
                        let off = (b * channels + c) * plane;
                        for k in off..off + plane {
                            d_gamma[c] += g[k] * xhat[k];
                            d_beta[c] += g[k];
                        }
                    }
                }
                if self.needs(*input) {
                    let mut d_in = vec![0.0; g.len()];
                    let count = (batch * plane) as f64;
                    for c in 0..channels {
                        let scale = gv[c] * inv_std[c];
                        for b in 0..batch {
                            let off = (b * channels + c) * plane;
                            for k in off..off + plane {
                                d_in[k] = if *train {
                                    scale * (g[k] - d_beta[c] / count - xhat[k] * d_gamma[c] / count)
                                } else {
                                    scale * g[k]
                                };
                            }
                        }
                    }
                    accumulate(&mut grads[input.0], &d_in);
                }
                if self.needs(*gamma) {
                    accumulate(&mut grads[gamma.0], &d_gamma);
                }
                if self.needs(*beta) {
                    accumulate(&mut grads[beta.0], &d_beta);
                }
            }
            Op::Relu(x) => {
                let d: Vec<f64> = self.value(*x).data().iter().zip(g).map(|(&a, &gv)| if a > 0.0 { gv } else { 0.0 }).collect();
                accumulate(&mut grads[x.0], &d);
            }
            Op::Sigmoid(x) => {
                let d: Vec<f64> = out.data().iter().zip(g).map(|(&y, &gv)| gv * y * (1.0 - y)).collect();
                accumulate(&mut grads[x.0], &d);
            }
            Op::Softmax(x) => {
                let m = *out.shape().last().unwrap_or(&1);
                let mut d = vec![0.0; g.len()];
                for ((yr, gr), dr) in out.data().chunks(m).zip(g.chunks(m)).zip(d.chunks_mut(m)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for ((dv, &y), &gv) in dr.iter_mut().zip(yr).zip(gr) {
                        *dv = y * (gv - dot);
                    }
                }
                accumulate(&mut grads[x.0], &d);
            }
            Op::GlobalAvgPool(x) => {
                let xs = self.shape(*x);
                let plane = xs[2] * xs[3];
                let inv = 1.0 / plane as f64;
                let d: Vec<f64> = g.iter().flat_map(|&gv| core::iter::repeat_n(gv * inv, plane)).collect();
                accumulate(&mut grads[x.0], &d);
            }
            Op::Linear { input, weight, bias } => {
                let w = self.value(*weight);
                let (fan_out, fan_in) = (w.shape()[0], w.shape()[1]);
                let rows = g.len() / fan_out;
                let x = self.value(*input).data();
                if self.needs(*input) {
                    let mut d = vec![0.0; rows * fan_in];
                    for r in 0..rows {
                        for o in 0..fan_out {
                            let gv = g[r * fan_out + o];
                            let wr = &w.data()[o * fan_in..][..fan_in];
                            d[r * fan_in..][..fan_in].iter_mut().zip(wr).for_each(|(a, b)| *a += gv * b);
                        }
                    }
                    accumulate(&mut grads[input.0], &d);
                }
                if self.needs(*weight) {
                    let mut d = vec![0.0; fan_out * fan_in];
                    for r in 0..rows {
                        let xr = &x[r * fan_in..][..fan_in];
                        for o in 0..fan_out {
                            let gv = g[r * fan_out + o];
                            d[o * fan_in..][..fan_in].iter_mut().zip(xr).for_each(|(a, b)| *a += gv * b);
                        }
                    }
                    accumulate(&mut grads[weight.0], &d);
                }
                if let Some(b) = bias.filter(|b| self.needs(*b)) {
                    let mut d = vec![0.0; fan_out];
                    for row in g.chunks(fan_out) {
                        d.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                    }
                    accumulate(&mut grads[b.0], &d);
                }
            }
            Op::MaskMul { feature, mask } => {
                let fs = self.shape(*feature);
                let (batch, channels, plane) = (fs[0], fs[1], fs[2] * fs[3]);
                let f = self.value(*feature).data();
                let m = self.value(*mask).data();
                if self.needs(*feature) {
                    let mut d = vec![0.0; f.len()];
                    for b in 0..batch {
                        for c in 0..channels {
                            let off = (b * channels + c) * plane;
                            for k in 0..plane {
                                d[off + k] = g[off + k] * m[b * plane + k];
                            }
                        }
                    }
                    accumulate(&mut grads[feature.0], &d);
                }
                if self.needs(*mask) {
                    let mut d = vec![0.0; m.len()];
                    for b in 0..batch {
                        for c in 0..channels {
                            let off = (b * channels + c) * plane;
                            for k in 0..plane {
                                d[b * plane + k] += g[off + k] * f[off + k];
                            }
                        }
                    }
                    accumulate(&mut grads[mask.0], &d);
                }
            }
            Op::Add(a, b) => {
                if self.needs(*a) {
                    accumulate(&mut grads[a.0], g);
                }
                if self.needs(*b) {
                    accumulate(&mut grads[b.0], g);
                }
            }
            Op::Mul(a, b) => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                if self.needs(*a) {
                    let d: Vec<f64> = g.iter().zip(bv).map(|(x, y)| x * y).collect();
                    accumulate(&mut grads[a.0], &d);
                }
                if self.needs(*b) {
                    let d: Vec<f64> = g.iter().zip(av).map(|(x, y)| x * y).collect();
                    accumulate(&mut grads[b.0], &d);
                }
            }
            Op::Scale(x, f) => {
                let d: Vec<f64> = g.iter().map(|v| v * f).collect();
                accumulate(&mut grads[x.0], &d);
            }
            Op::AddN(xs) => {
                for x in xs.iter().filter(|x| self.needs(**x)) {
                    accumulate(&mut grads[x.0], g);
                }
            }
            Op::SumAll(x) => {
                let d = vec![g[0]; self.value(*x).numel()];
                accumulate(&mut grads[x.0], &d);
            }
            Op::ScaleRows { x, s } => {
                let xv = self.value(*x);
                let d_cols = xv.shape()[1];
                let sv = self.value(*s).data();
                if self.needs(*x) {
                    let d: Vec<f64> = g.chunks(d_cols).zip(sv).flat_map(|(row, &f)| row.iter().map(move |a| a * f)).collect();
                    accumulate(&mut grads[x.0], &d);
                }
                if self.needs(*s) {
                    let d: Vec<f64> = g
                        .chunks(d_cols)
                        .zip(xv.data().chunks(d_cols))
                        .map(|(gr, xr)| gr.iter().zip(xr).map(|(a, b)| a * b).sum::<f64>())
                        .collect();
                    accumulate(&mut grads[s.0], &d);
                }
            }
            Op::Column { x, j } => {
                let m = self.shape(*x)[1];
                let mut d = vec![0.0; self.value(*x).numel()];
                for (r, &gv) in g.iter().enumerate() {
                    d[r * m + j] = gv;
                }
                accumulate(&mut grads[x.0], &d);
            }
            Op::StackColumns(cols) => {
                let m = cols.len();
                for (j, c) in cols.iter().enumerate() {
                    if self.needs(*c) {
                        let d: Vec<f64> = g.chunks(m).map(|row| row[j]).collect();
                        accumulate(&mut grads[c.0], &d);
                    }
                }
            }
            Op::RowDot { x, w } => {
                let xv = self.value(*x);
                let dim = xv.shape()[1];
                let wv = self.value(*w).data();
                if self.needs(*x) {
                    let d: Vec<f64> = g.iter().flat_map(|&gv| wv.iter().map(move |b| gv * b)).collect();
                    accumulate(&mut grads[x.0], &d);
                }
                if self.needs(*w) {
                    let mut d = vec![0.0; dim];
                    for (row, &gv) in xv.data().chunks(dim).zip(g) {
                        d.iter_mut().zip(row).for_each(|(a, b)| *a += gv * b);
                    }
                    accumulate(&mut grads[w.0], &d);
                }
            }
            Op::Bce { p, labels, w_pos, w_neg } => {
                let n = labels.len() as f64;
                let d: Vec<f64> = self
                    .value(*p)
                    .data()
                    .iter()
                    .zip(labels)
                    .map(|(&pv, &y)| {
                        if pv <= PROB_EPS || pv >= 1.0 - PROB_EPS {
                            0.0
                        } else {
                            g[0] * (-w_pos * y / pv + w_neg * (1.0 - y) / (1.0 - pv)) / n
                        }
                    })
                    .collect();
                accumulate(&mut grads[p.0], &d);
            }
        }
    }

    /// `(ParamId, Var)` for every parameter loaded onto this tape.
    pub fn param_vars(&self) -> impl Iterator<Item = (ParamId, Var)> + '_ {
        self.param_vars.iter().map(|(&id, &v)| (id, v))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn scalar_conv_is_product() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 1, 1, 1], &[2.0]));
        let w = tape.constant(t(&[1, 1, 1, 1], &[3.0]));
        let b = tape.constant(t(&[1], &[0.0]));
        let y = tape.conv2d(x, w, b, 1, Padding::Same).unwrap();
        assert_eq!(tape.value(y).data(), &[6.0]);
    }

    #[test]
    fn valid_conv_of_ones_sums_kernel() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full(&[1, 1, 3, 3], 1.0));
        let w = tape.constant(Tensor::full(&[1, 1, 3, 3], 1.0));
        let b = tape.constant(t(&[1], &[0.0]));
        let y = tape.conv2d(x, w, b, 1, Padding::Valid).unwrap();
        assert_eq!(tape.shape(y), &[1, 1, 1, 1]);
        assert_eq!(tape.value(y).data(), &[9.0]);
    }

    #[test]
    fn conv_rejects_channel_mismatch_and_even_same_kernel() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[1, 2, 4, 4]));
        let w = tape.constant(Tensor::zeros(&[1, 3, 3, 3]));
        let b = tape.constant(Tensor::zeros(&[1]));
        assert!(matches!(tape.conv2d(x, w, b, 1, Padding::Same), Err(Error::Dimension { .. })));
        let w2 = tape.constant(Tensor::zeros(&[1, 2, 2, 2]));
        assert!(tape.conv2d(x, w2, b, 1, Padding::Same).is_err());
        assert!(tape.conv2d(x, w2, b, 1, Padding::Valid).is_ok());
    }

    #[test]
    fn batchnorm_constant_input_and_scale_annihilation() {
        let mut rm = vec![0.0; 2];
        let mut rv = vec![1.0; 2];
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full(&[2, 2, 2, 2], 3.5));
        let one = tape.constant(Tensor::full(&[2], 1.0));
        let zero = tape.constant(Tensor::zeros(&[2]));
        let y = tape
            .batchnorm2d(
                x,
                one,
                zero,
                BatchNormMode::Train { running_mean: &mut rm, running_var: &mut rv },
                BatchNormConfig::default(),
            )
            .unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
        assert!((rm[0] - 0.35).abs() < 1e-15);
        assert!((rv[0] - 0.9).abs() < 1e-15);

        let x = tape.constant(t(&[1, 2, 1, 2], &[1.0, -4.0, 0.5, 7.0]));
        let five = tape.constant(Tensor::full(&[2], 5.0));
        let y = tape
            .batchnorm2d(
                x,
                zero,
                five,
                BatchNormMode::Train { running_mean: &mut rm, running_var: &mut rv },
                BatchNormConfig::default(),
            )
            .unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 5.0));
    }

    #[test]
    fn batchnorm_degenerate_batch() {
        let (mut rm, mut rv) = (vec![0.0], vec![1.0]);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[1, 1, 1, 1]));
        let g = tape.constant(Tensor::full(&[1], 1.0));
        let b = tape.constant(Tensor::zeros(&[1]));
        let r = tape.batchnorm2d(
            x,
            g,
            b,
            BatchNormMode::Train { running_mean: &mut rm, running_var: &mut rv },
            BatchNormConfig::default(),
        );
        assert_eq!(r.unwrap_err(), Error::DegenerateBatch(1));
        let ok =
            tape.batchnorm2d(x, g, b, BatchNormMode::Eval { running_mean: &rm, running_var: &rv }, BatchNormConfig::default());
        assert!(ok.is_ok());
    }

    #[test]
    fn relu_and_sigmoid_values() {
        let mut tape = Tape::new();
        let x = tape.variable(t(&[3], &[-1.5, 2.0, 0.0]));
        let r = tape.relu(x).unwrap();
        assert_eq!(tape.value(r).data(), &[0.0, 2.0, 0.0]);
        let s = tape.sigmoid(x).unwrap();
        assert_eq!(tape.value(s).data()[2], 0.5);
        let col = tape.sum_all(s).unwrap();
        let g = tape.backward(col).unwrap();
        assert_eq!(g.get(x).unwrap()[2], 0.25);
    }

    #[test]
    fn softmax_symmetry_and_overflow() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full(&[7], 0.3));
        let y = tape.softmax(x).unwrap();
        for &v in tape.value(y).data() {
            assert!((v - 1.0 / 7.0).abs() < 1e-15);
        }
        let x = tape.constant(t(&[2], &[1000.0, 0.0]));
        let y = tape.softmax(x).unwrap();
        let d = tape.value(y).data();
        assert!((d[0] - 1.0).abs() < 1e-15 && d[1] >= 0.0 && d[1] < 1e-300);
    }

    #[test]
    fn gap_values_and_uniform_gradient() {
        let mut tape = Tape::new();
        let x = tape.variable(t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let y = tape.global_avg_pool(x).unwrap();
        assert_eq!(tape.value(y).data(), &[2.5]);
        let s = tape.sum_all(y).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap(), &[0.25; 4]);
    }

    #[test]
    fn linear_identity_and_small_case() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[3], &[1.0, -2.0, 0.5]));
        let eye = tape.constant(t(&[3, 3], &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]));
        let zero = tape.constant(Tensor::zeros(&[3]));
        let y = tape.linear(x, eye, Some(zero)).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, -2.0, 0.5]);

        let x = tape.constant(t(&[2], &[2.0, 3.0]));
        let w = tape.constant(t(&[1, 2], &[1.0, 1.0]));
        let b = tape.constant(t(&[1], &[1.0]));
        let y = tape.linear(x, w, Some(b)).unwrap();
        assert_eq!(tape.value(y).data(), &[6.0]);
        let bad = tape.constant(t(&[1, 3], &[1.0, 1.0, 1.0]));
        assert!(tape.linear(x, bad, None).is_err());
    }

    #[test]
    fn backward_identity_and_product_rule() {
        let mut tape = Tape::new();
        let x = tape.variable(Tensor::scalar(5.0));
        let g = tape.backward(x).unwrap();
        assert_eq!(g.get(x).unwrap(), &[1.0]);

        let x = tape.variable(Tensor::scalar(2.0));
        let y = tape.variable(Tensor::scalar(3.0));
        let z = tape.mul(x, y).unwrap();
        let g = tape.backward(z).unwrap();
        assert_eq!(g.get(x).unwrap(), &[3.0]);
        assert_eq!(g.get(y).unwrap(), &[2.0]);
    }

    #[test]
    fn backward_errors() {
        let mut tape = Tape::new();
        let v = tape.variable(Tensor::zeros(&[2]));
        assert!(matches!(tape.backward(v), Err(Error::NotScalar(_))));
        let c = tape.constant(Tensor::scalar(1.0));
        let s = tape.scale(c, 2.0).unwrap();
        assert_eq!(tape.backward(s).unwrap_err(), Error::Detached);
    }

    #[test]
    fn non_finite_results_are_errors() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::scalar(1e308));
        assert!(matches!(tape.scale(x, 10.0), Err(Error::NonFinite { op: "scale" })));
    }

    #[test]
    fn bce_matches_closed_form() {
        let mut tape = Tape::new();
        let p = tape.variable(t(&[2], &[0.5, 0.8]));
        let l = tape.bce_mean(p, &[0.0, 1.0], 1.0, 1.0).unwrap();
        let expect = (core::f64::consts::LN_2 - libm::log(0.8)) / 2.0;
        assert!((tape.value(l).data()[0] - expect).abs() < 1e-15);
    }

    #[test]
    fn fault_injection_scales_gradient() {
        let mut tape = Tape::new();
        let x = tape.variable(Tensor::scalar(0.0));
        let s = tape.sigmoid(x).unwrap();
        tape.inject_fault(BackwardFault { op: "sigmoid", scale: 2.0 });
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap(), &[0.5]);
    }
}
