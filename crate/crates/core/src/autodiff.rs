//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every primitive appends one node holding its output value and the inputs
//! needed by its vector-Jacobian rule. Nodes are appended in evaluation order,
//! so the tape is topologically sorted by construction and `backward` is a
//! single reverse sweep.
//!
//! Gradients accumulate: calling `backward` twice without `zero_grad` sums
//! both contributions.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Storage precision for values produced on the tape.
///
/// `F32` rounds every forward value and every accumulated gradient through
/// single precision; arithmetic itself stays in `f64`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    #[default]
    F64,
    F32,
}

impl Precision {
    pub fn bytes_per_value(self) -> u64 {
        match self {
            Precision::F64 => 8,
            Precision::F32 => 4,
        }
    }

    #[inline]
    pub fn round(self, v: f64) -> f64 {
        match self {
            Precision::F64 => v,
            Precision::F32 => v as f32 as f64,
        }
    }
}

/// Pointwise nonlinearities.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Relu,
    Sigmoid,
    Swish,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Sigmoid => sigmoid(x),
            Activation::Swish => x * sigmoid(x),
        }
    }

    fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Sigmoid => {
                let s = sigmoid(x);
                s * (1.0 - s)
            }
            Activation::Swish => {
                let s = sigmoid(x);
                s + x * s * (1.0 - s)
            }
        }
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Scale(Var, f64),
    Activate(Var, Activation),
    Transpose(Var),
    SoftmaxRows(Var),
    Sum(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    SoftmaxXent {
        logits: Var,
        labels: Vec<usize>,
        mask: Vec<bool>,
        probs: Vec<f64>,
        count: usize,
    },
    DepthwiseConv1d {
        x: Var,
        weight: Var,
    },
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    grad: Option<Tensor>,
    op: Op,
}

/// Ordered record of primitive operations.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    precision: Precision,
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::ShapeMismatch {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

fn transpose_raw(a: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
    out
}

fn accumulate(slot: &mut Option<Vec<f64>>, delta: Vec<f64>) {
    match slot {
        Some(g) => {
            for (a, d) in g.iter_mut().zip(delta) {
                *a += d;
            }
        }
        None => *slot = Some(delta),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_precision(precision: Precision) -> Self {
        Self {
            nodes: Vec::new(),
            precision,
        }
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    fn push(&mut self, mut value: Tensor, requires_grad: bool, op: Op) -> Var {
        if self.precision != Precision::F64 {
            let p = self.precision;
            value.data_mut().iter_mut().for_each(|v| *v = p.round(*v));
        }
        self.nodes.push(Node {
            value,
            requires_grad,
            grad: None,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Records a leaf. Trainable parameters use `requires_grad = true`.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape().len() != 2 || bv.shape().len() != 2 || av.shape()[1] != bv.shape()[0] {
            return Err(shape_err("matmul", av, bv));
        }
        let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
        let out = Tensor::new(vec![m, n], matmul_raw(av.data(), bv.data(), m, k, n))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, rg, Op::MatMul(a, b)))
    }

    fn binary(&mut self, a: Var, b: Var, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() == bv.shape() {
            let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
            Tensor::new(av.shape().to_vec(), data)
        } else if bv.is_scalar() {
            let s = bv.item();
            Ok(av.map(|x| f(x, s)))
        } else if av.is_scalar() {
            let s = av.item();
            Ok(bv.map(|y| f(s, y)))
        } else {
            Err(shape_err(op, av, bv))
        }
    }

    /// Elementwise sum; equal shapes or scalar-vs-tensor.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "add", |x, y| x + y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, rg, Op::Add(a, b)))
    }

    /// Elementwise product; equal shapes or scalar-vs-tensor.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "mul", |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, rg, Op::Mul(a, b)))
    }

    /// Adds a `[c]` bias to every row of an `[.., c]` tensor.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(bias));
        if bv.shape().len() != 1 || xv.last_dim() != bv.numel() || xv.shape().is_empty() {
            return Err(shape_err("add_bias", xv, bv));
        }
        let c = bv.numel();
        let mut data = xv.data().to_vec();
        for row in data.chunks_mut(c) {
            for (o, &b) in row.iter_mut().zip(bv.data()) {
                *o += b;
            }
        }
        let out = Tensor::new(xv.shape().to_vec(), data)?;
        let rg = self.rg(&[x, bias]);
        Ok(self.push(out, rg, Op::AddBias(x, bias)))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let out = self.value(x).scaled(factor);
        let rg = self.rg(&[x]);
        self.push(out, rg, Op::Scale(x, factor))
    }

    pub fn activate(&mut self, x: Var, act: Activation) -> Var {
        let out = self.value(x).map(|v| act.apply(v));
        let rg = self.rg(&[x]);
        self.push(out, rg, Op::Activate(x, act))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.activate(x, Activation::Relu)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.activate(x, Activation::Sigmoid)
    }

    pub fn swish(&mut self, x: Var) -> Var {
        self.activate(x, Activation::Swish)
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if xv.shape().len() != 2 {
            return Err(Error::InvalidTensor(format!("transpose needs a matrix, got {:?}", xv.shape())));
        }
        let (m, n) = (xv.shape()[0], xv.shape()[1]);
        let out = Tensor::new(vec![n, m], transpose_raw(xv.data(), m, n))?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, rg, Op::Transpose(x)))
    }

    /// Softmax along the last axis.
    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let d = xv.last_dim();
        let mut data = xv.data().to_vec();
        for row in data.chunks_mut(d.max(1)) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            row.iter_mut().for_each(|v| *v /= total);
        }
        let out = Tensor::new(xv.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(&[x]);
        self.push(out, rg, Op::SoftmaxRows(x))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.value(x).data().iter().sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(total), rg, Op::Sum(x))
    }

    /// Normalizes each row over the last axis, then applies `gain` and `bias`.
    pub fn layernorm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let xv = self.value(x);
        let d = xv.last_dim();
        if d == 0 || xv.shape().is_empty() {
            return Err(Error::InvalidTensor("layernorm needs a non-empty last axis".into()));
        }
        let (gv, bv) = (self.value(gain), self.value(bias));
        if gv.shape() != [d] {
            return Err(shape_err("layernorm gain", xv, gv));
        }
        if bv.shape() != [d] {
            return Err(shape_err("layernorm bias", xv, bv));
        }
        let rows = xv.rows();
        let mut xhat = vec![0.0; xv.numel()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; xv.numel()];
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let s = 1.0 / (var + eps).sqrt();
            rstd[r] = s;
            for c in 0..d {
                let h = (row[c] - mean) * s;
                xhat[r * d + c] = h;
                out[r * d + c] = h * gv.data()[c] + bv.data()[c];
            }
        }
        let out = Tensor::new(xv.shape().to_vec(), out)?;
        let rg = self.rg(&[x, gain, bias]);
        Ok(self.push(
            out,
            rg,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
        ))
    }

    /// Mean cross-entropy over the rows selected by `mask`.
    pub fn softmax_xent(&mut self, logits: Var, labels: &[usize], mask: &[bool]) -> Result<Var> {
        let lv = self.value(logits);
        if lv.shape().len() != 2 {
            return Err(Error::InvalidTensor(format!("logits must be [n, V], got {:?}", lv.shape())));
        }
        let (n, classes) = (lv.shape()[0], lv.shape()[1]);
        if labels.len() != n || mask.len() != n {
            return Err(Error::ShapeMismatch {
                op: "softmax_xent",
                left: lv.shape().to_vec(),
                right: vec![labels.len(), mask.len()],
            });
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(Error::EmptyMask);
        }
        let mut probs = vec![0.0; n * classes];
        let mut loss = 0.0;
        for r in 0..n {
            if !mask[r] {
                continue;
            }
            let label = labels[r];
            if label >= classes {
                return Err(Error::LabelOutOfRange { label, classes });
            }
            let row = lv.row(r);
            let (arg, max) = row
                .iter()
                .copied()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (i, v)| if v > best.1 { (i, v) } else { best });
            // ln(1 + rest) keeps precision when one logit dominates
            let rest: f64 = row
                .iter()
                .enumerate()
                .filter(|&(i, _)| i != arg)
                .map(|(_, v)| (v - max).exp())
                .sum();
            let lse = max + rest.ln_1p();
            loss += (max - row[label]) + rest.ln_1p();
            for c in 0..classes {
                probs[r * classes + c] = (row[c] - lse).exp();
            }
        }
        let out = Tensor::scalar(loss / count as f64);
        let rg = self.rg(&[logits]);
        Ok(self.push(
            out,
            rg,
            Op::SoftmaxXent {
                logits,
                labels: labels.to_vec(),
                mask: mask.to_vec(),
                probs,
                count,
            },
        ))
    }

    /// Depthwise 1-D convolution over the time axis with "same" zero padding.
    ///
    /// `x` is `[T, C]`, `weight` is `[K, C]`; output frame `t` sums
    /// `weight[j, c] * x[t + j - (K - 1) / 2, c]` over in-range taps.
    pub fn depthwise_conv1d(&mut self, x: Var, weight: Var) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(weight));
        if xv.shape().len() != 2 || wv.shape().len() != 2 || xv.shape()[1] != wv.shape()[1] {
            return Err(shape_err("depthwise_conv1d", xv, wv));
        }
        let (t_len, c) = (xv.shape()[0], xv.shape()[1]);
        let k = wv.shape()[0];
        let pad = (k.saturating_sub(1) / 2) as isize;
        let mut out = vec![0.0; t_len * c];
        for t in 0..t_len {
            for j in 0..k {
                let src = t as isize + j as isize - pad;
                if src < 0 || src >= t_len as isize {
                    continue;
                }
                let src = src as usize;
                for ch in 0..c {
                    out[t * c + ch] += wv.data()[j * c + ch] * xv.data()[src * c + ch];
                }
            }
        }
        let out = Tensor::new(vec![t_len, c], out)?;
        let rg = self.rg(&[x, weight]);
        Ok(self.push(out, rg, Op::DepthwiseConv1d { x, weight }))
    }

    /// Propagates d`loss`/d(node) back through the tape.
    ///
    /// Every `requires_grad` node reachable from `loss` has its gradient
    /// accumulated; unreachable `requires_grad` leaves receive zeros.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            self.propagate(i, &g, &mut grads);
            let p = self.precision;
            let node = &mut self.nodes[i];
            match &mut node.grad {
                Some(acc) => {
                    for (a, d) in acc.data_mut().iter_mut().zip(&g) {
                        *a = p.round(*a + d);
                    }
                }
                None => {
                    let data = g.iter().map(|&v| p.round(v)).collect();
                    node.grad = Some(Tensor::new(node.value.shape().to_vec(), data)?);
                }
            }
        }
        for node in &mut self.nodes {
            if node.requires_grad && matches!(node.op, Op::Leaf) && node.grad.is_none() {
                node.grad = Some(Tensor::zeros(node.value.shape()));
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let mut send = |v: Var, delta: Vec<f64>| {
            if self.nodes[v.0].requires_grad {
                accumulate(&mut grads[v.0], delta);
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                if self.requires_grad(*a) {
                    let bt = transpose_raw(bv.data(), k, n);
                    send(*a, matmul_raw(g, &bt, m, n, k));
                }
                if self.requires_grad(*b) {
                    let at = transpose_raw(av.data(), m, k);
                    send(*b, matmul_raw(&at, g, k, m, n));
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if self.value(v).numel() == g.len() {
                        send(v, g.to_vec());
                    } else {
                        send(v, vec![g.iter().sum()]);
                    }
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let pick = |t: &Tensor, idx: usize| if t.numel() == 1 { t.item() } else { t.data()[idx] };
                let da: Vec<f64> = (0..g.len()).map(|j| g[j] * pick(bv, j)).collect();
                let db: Vec<f64> = (0..g.len()).map(|j| g[j] * pick(av, j)).collect();
                for (v, d) in [(*a, da), (*b, db)] {
                    if self.value(v).numel() == g.len() {
                        send(v, d);
                    } else {
                        send(v, vec![d.iter().sum()]);
                    }
                }
            }
            Op::AddBias(x, bias) => {
                send(*x, g.to_vec());
                let c = self.value(*bias).numel();
                let mut db = vec![0.0; c];
                for row in g.chunks(c) {
                    for (d, &v) in db.iter_mut().zip(row) {
                        *d += v;
                    }
                }
                send(*bias, db);
            }
            Op::Scale(x, f) => send(*x, g.iter().map(|v| v * f).collect()),
            Op::Activate(x, act) => {
                let xv = self.value(*x);
                send(*x, xv.data().iter().zip(g).map(|(&v, &d)| d * act.derivative(v)).collect());
            }
            Op::Transpose(x) => {
                let s = self.value(*x).shape();
                send(*x, transpose_raw(g, s[1], s[0]));
            }
            Op::SoftmaxRows(x) => {
                let y = &node.value;
                let d = y.last_dim();
                let mut dx = vec![0.0; g.len()];
                for r in 0..y.rows() {
                    let yr = y.row(r);
                    let gr = &g[r * d..(r + 1) * d];
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for c in 0..d {
                        dx[r * d + c] = yr[c] * (gr[c] - dot);
                    }
                }
                send(*x, dx);
            }
            Op::Sum(x) => send(*x, vec![g[0]; self.value(*x).numel()]),
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let gv = self.value(*gain);
                let d = gv.numel();
                let rows = rstd.len();
                let mut dgain = vec![0.0; d];
                let mut dbias = vec![0.0; d];
                let mut dx = vec![0.0; g.len()];
                for r in 0..rows {
                    let gr = &g[r * d..(r + 1) * d];
                    let hr = &xhat[r * d..(r + 1) * d];
                    let mut mean_dh = 0.0;
                    let mut mean_dh_h = 0.0;
                    for c in 0..d {
                        dgain[c] += gr[c] * hr[c];
                        dbias[c] += gr[c];
                        let dh = gr[c] * gv.data()[c];
                        mean_dh += dh;
                        mean_dh_h += dh * hr[c];
                    }
                    mean_dh /= d as f64;
                    mean_dh_h /= d as f64;
                    for c in 0..d {
                        let dh = gr[c] * gv.data()[c];
                        dx[r * d + c] = rstd[r] * (dh - mean_dh - hr[c] * mean_dh_h);
                    }
                }
                send(*x, dx);
                send(*gain, dgain);
                send(*bias, dbias);
            }
            Op::SoftmaxXent {
                logits,
                labels,
                mask,
                probs,
                count,
            } => {
                let classes = self.value(*logits).last_dim();
                let scale = g[0] / *count as f64;
                let mut dl = vec![0.0; probs.len()];
                for (r, &m) in mask.iter().enumerate() {
                    if !m {
                        continue;
                    }
                    for c in 0..classes {
                        let onehot = if c == labels[r] { 1.0 } else { 0.0 };
                        dl[r * classes + c] = (probs[r * classes + c] - onehot) * scale;
                    }
                }
                send(*logits, dl);
            }
            Op::DepthwiseConv1d { x, weight } => {
                let (xv, wv) = (self.value(*x), self.value(*weight));
                let (t_len, c) = (xv.shape()[0], xv.shape()[1]);
                let k = wv.shape()[0];
                let pad = (k.saturating_sub(1) / 2) as isize;
                let mut dx = vec![0.0; xv.numel()];
                let mut dw = vec![0.0; wv.numel()];
                for t in 0..t_len {
                    for j in 0..k {
                        let src = t as isize + j as isize - pad;
                        if src < 0 || src >= t_len as isize {
                            continue;
                        }
                        let src = src as usize;
                        for ch in 0..c {
                            let go = g[t * c + ch];
                            dx[src * c + ch] += wv.data()[j * c + ch] * go;
                            dw[j * c + ch] += xv.data()[src * c + ch] * go;
                        }
                    }
                }
                send(*x, dx);
                send(*weight, dw);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn leaf(t: &mut Tape, shape: &[usize], data: &[f64]) -> Var {
        t.leaf(Tensor::new(shape.to_vec(), data.to_vec()).unwrap(), true)
    }

    #[test]
    fn identity_matmul() {
        let mut t = Tape::new();
        let a = leaf(&mut t, &[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        let b = leaf(&mut t, &[2, 2], &[3.0, 4.0, 5.0, 6.0]);
        let c = t.matmul(a, b).unwrap();
        assert_eq!(t.value(c).data(), &[3.0, 4.0, 5.0, 6.0]);
    }

    #[test]
    fn row_times_column() {
        let mut t = Tape::new();
        let a = leaf(&mut t, &[1, 2], &[1.0, 2.0]);
        let b = leaf(&mut t, &[2, 1], &[3.0, 4.0]);
        let c = t.matmul(a, b).unwrap();
        assert_eq!(t.value(c).shape(), &[1, 1]);
        assert_eq!(t.value(c).data(), &[11.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut t = Tape::new();
        let a = leaf(&mut t, &[2, 3], &[0.0; 6]);
        let b = leaf(&mut t, &[2, 3], &[0.0; 6]);
        match t.matmul(a, b) {
            Err(Error::ShapeMismatch { left, right, .. }) => {
                assert_eq!(left, vec![2, 3]);
                assert_eq!(right, vec![2, 3]);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn relu_and_sigmoid_values() {
        let mut t = Tape::new();
        let x = leaf(&mut t, &[3], &[-1.0, 0.0, 2.0]);
        let r = t.relu(x);
        assert_eq!(t.value(r).data(), &[0.0, 0.0, 2.0]);
        let z = leaf(&mut t, &[1], &[0.0]);
        let s = t.sigmoid(z);
        assert_eq!(t.value(s).item(), 0.5);
    }

    #[test]
    fn incompatible_add_is_rejected() {
        let mut t = Tape::new();
        let a = leaf(&mut t, &[2], &[1.0, 2.0]);
        let b = leaf(&mut t, &[3], &[1.0, 2.0, 3.0]);
        assert!(matches!(t.add(a, b), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn scalar_broadcast_gradients_reduce() {
        let mut t = Tape::new();
        let a = leaf(&mut t, &[3], &[1.0, 2.0, 3.0]);
        let s = leaf(&mut t, &[], &[2.0]);
        let m = t.mul(a, s).unwrap();
        let l = t.sum(m);
        t.backward(l).unwrap();
        assert_eq!(t.grad(s).unwrap().data(), &[6.0]);
        assert_eq!(t.grad(a).unwrap().data(), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn layernorm_constant_row_collapses_to_bias() {
        let mut t = Tape::new();
        let x = leaf(&mut t, &[3], &[1.0, 1.0, 1.0]);
        let g = leaf(&mut t, &[3], &[1.0; 3]);
        let b = leaf(&mut t, &[3], &[0.0; 3]);
        let y = t.layernorm(x, g, b, 1e-5).unwrap();
        assert_eq!(t.value(y).data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn layernorm_two_values() {
        let mut t = Tape::new();
        let x = leaf(&mut t, &[2], &[0.0, 2.0]);
        let g = leaf(&mut t, &[2], &[1.0; 2]);
        let b = leaf(&mut t, &[2], &[0.0; 2]);
        let y = t.layernorm(x, g, b, 1e-12).unwrap();
        let v = t.value(y).data();
        assert!((v[0] + 1.0).abs() < 1e-6 && (v[1] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn xent_uniform_logits() {
        let mut t = Tape::new();
        let l = leaf(&mut t, &[2, 4], &[0.3; 8]);
        let loss = t.softmax_xent(l, &[1, 3], &[true, true]).unwrap();
        assert!((t.value(loss).item() - 4f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn xent_confident_logits() {
        let mut t = Tape::new();
        let l = leaf(&mut t, &[1, 2], &[10.0, -10.0]);
        let loss = t.softmax_xent(l, &[0], &[true]).unwrap();
        // ln(1 + e^-20)
        let expected = (-20f64).exp().ln_1p();
        assert!((t.value(loss).item() - expected).abs() < 1e-18);
        assert!((t.value(loss).item() - 2.06e-9).abs() < 1e-10);
    }

    #[test]
    fn xent_rejects_empty_mask_and_bad_labels() {
        let mut t = Tape::new();
        let l = leaf(&mut t, &[2, 3], &[0.0; 6]);
        assert!(matches!(t.softmax_xent(l, &[0, 1], &[false, false]), Err(Error::EmptyMask)));
        assert!(matches!(
            t.softmax_xent(l, &[0, 3], &[true, true]),
            Err(Error::LabelOutOfRange { label: 3, classes: 3 })
        ));
    }

    #[test]
    fn masked_rows_get_zero_gradient() {
        let mut t = Tape::new();
        let l = leaf(&mut t, &[2, 3], &[0.1, 0.2, 0.3, 0.4, 0.5, 0.6]);
        let loss = t.softmax_xent(l, &[0, 1], &[true, false]).unwrap();
        t.backward(loss).unwrap();
        assert_eq!(&t.grad(l).unwrap().data()[3..], &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn sum_and_square_gradients() {
        let mut t = Tape::new();
        let w = leaf(&mut t, &[2], &[1.0, 2.0]);
        let s = t.sum(w);
        t.backward(s).unwrap();
        assert_eq!(t.grad(w).unwrap().data(), &[1.0, 1.0]);

        let mut t = Tape::new();
        let w = leaf(&mut t, &[2], &[1.0, 2.0]);
        let sq = t.mul(w, w).unwrap();
        let s = t.sum(sq);
        t.backward(s).unwrap();
        assert_eq!(t.grad(w).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut t = Tape::new();
        let w = leaf(&mut t, &[2], &[1.0, 2.0]);
        assert!(matches!(t.backward(w), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn unreachable_leaf_gets_zero_and_grads_accumulate() {
        let mut t = Tape::new();
        let w = leaf(&mut t, &[2], &[1.0, 2.0]);
        let unused = leaf(&mut t, &[3], &[1.0, 2.0, 3.0]);
        let s = t.sum(w);
        t.backward(s).unwrap();
        assert_eq!(t.grad(unused).unwrap().data(), &[0.0; 3]);
        t.backward(s).unwrap();
        assert_eq!(t.grad(w).unwrap().data(), &[2.0, 2.0]);
        t.zero_grad();
        t.backward(s).unwrap();
        assert_eq!(t.grad(w).unwrap().data(), &[1.0, 1.0]);
    }

    #[test]
    fn frozen_leaf_receives_no_grad() {
        let mut t = Tape::new();
        let w = leaf(&mut t, &[2], &[1.0, 2.0]);
        let c = t.constant(Tensor::vector(vec![3.0, 4.0]));
        let p = t.mul(w, c).unwrap();
        let s = t.sum(p);
        t.backward(s).unwrap();
        assert!(t.grad(c).is_none());
        assert_eq!(t.grad(w).unwrap().data(), &[3.0, 4.0]);
    }

    #[test]
    fn f32_precision_rounds_values() {
        let mut t = Tape::with_precision(Precision::F32);
        let x = t.leaf(Tensor::vector(vec![0.1]), true);
        assert_eq!(t.value(x).item(), 0.1f32 as f64);
        assert_eq!(Precision::F32.bytes_per_value(), 4);
    }
}
