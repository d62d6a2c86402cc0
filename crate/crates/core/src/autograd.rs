//! Reverse-mode differentiation over a dynamically recorded tape.
//!
//! Every op appends a node holding its forward value and enough context to
//! replay the chain rule. [`Tape::backward`] consumes the tape, so the graph
//! is freed once gradients have been extracted.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{dim_err, Error, Result};
use crate::math;
use crate::ops::{self, ConvGeometry};
use crate::tensor::{Precision, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Row-stochastic weights captured from one attention call.
#[derive(Debug, Clone)]
pub struct AttentionRecord {
    pub label: String,
    /// heads × queries × keys
    pub weights: Tensor,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    MulScalar(Var, Var),
    Relu(Var),
    Sigmoid(Var),
    Softmax { x: Var, axis: usize },
    LayerNorm { x: Var, gain: Var, bias: Var, mean: Vec<f64>, rstd: Vec<f64> },
    Conv2d { x: Var, k: Var, geom: ConvGeometry },
    MaxPool { x: Var, arg: Vec<usize> },
    GlobalAvgPool(Var),
    Gather { x: Var, index: Vec<usize> },
    Reshape(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    Attention { q: Var, k: Var, v: Var, heads: usize, probs: Vec<f64> },
    Sum(Var),
    Mean(Var),
    Bce { p: Var, target: f64 },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    tracked: bool,
}

/// Clamp applied to probabilities inside the cross-entropy.
pub const BCE_EPS: f64 = 1e-7;

const KINK_SEED: u64 = 0xcbf2_9ce4_8422_2325;

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    precision: Precision,
    no_grad: bool,
    capture: Option<Vec<AttentionRecord>>,
    kinks: Option<u64>,
}

/// Gradients of a scalar with respect to every tracked node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

impl Tape {
    pub fn new(precision: Precision) -> Self {
        Self {
            precision,
            ..Self::default()
        }
    }

    /// A tape that never records backward context; tracked leaves behave
    /// like constants.
    pub fn inference(precision: Precision) -> Self {
        Self {
            precision,
            no_grad: true,
            ..Self::default()
        }
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    /// Starts recording every attention weight matrix produced.
    pub fn capture_attention(&mut self) {
        self.capture = Some(Vec::new());
    }

    /// Starts hashing every branch taken by a non-smooth op (ReLU sign,
    /// max-pool argmax). Two evaluations with equal hashes lie on the same
    /// smooth piece.
    pub fn track_kinks(&mut self) {
        self.kinks = Some(KINK_SEED);
    }

    pub fn kink_signature(&self) -> Option<u64> {
        self.kinks
    }

    fn mix_kinks(&mut self, items: impl Iterator<Item = u64>) {
        if let Some(h) = self.kinks.as_mut() {
            for x in items {
                *h = (*h ^ x).wrapping_mul(0x0000_0100_0000_01b3);
            }
        }
    }

    pub fn take_attention(&mut self) -> Vec<AttentionRecord> {
        self.capture.take().unwrap_or_default()
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

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    fn push(&mut self, mut value: Tensor, op: Op, inputs: &[Var]) -> Var {
        self.precision.round_slice(value.data_mut());
        value.requires_grad = false;
        value.grad = None;
        let tracked = !self.no_grad && inputs.iter().any(|&v| self.tracked(v));
        let op = if tracked { op } else { Op::Leaf };
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, mut value: Tensor, requires_grad: bool) -> Var {
        self.precision.round_slice(value.data_mut());
        value.requires_grad = false;
        value.grad = None;
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            tracked: requires_grad && !self.no_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Registers a parameter tensor; tracked iff `t.requires_grad`.
    pub fn param(&mut self, t: &Tensor) -> Var {
        let v = Tensor::new(t.shape(), t.data().to_vec()).expect("valid tensor");
        self.leaf(v, t.requires_grad)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::ShapeMismatch {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::matmul(self.value(a), self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b), &[a, b]))
    }

    fn zip(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (x, y) = (self.value(a), self.value(b));
        Tensor::from_fn(x.shape(), |i| f(x.data()[i], y.data()[i]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.zip(a, b, |x, y| x + y);
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.zip(a, b, |x, y| x - y);
        Ok(self.push(out, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.zip(a, b, |x, y| x * y);
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    /// `x + b` with `b` broadcast along every leading axis of `x`.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let n = self.value(b).len();
        if self.shape(x).last() != Some(&n) {
            return Err(Error::ShapeMismatch {
                op: "add_row",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let (xv, bv) = (self.value(x), self.value(b));
        let out = Tensor::from_fn(xv.shape(), |i| xv.data()[i] + bv.data()[i % n]);
        Ok(self.push(out, Op::AddRow(x, b), &[x, b]))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let xv = self.value(x);
        let out = Tensor::from_fn(xv.shape(), |i| xv.data()[i] * c);
        self.push(out, Op::Scale(x, c), &[x])
    }

    /// `x · s` where `s` holds a single value.
    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(dim_err(format!(
                "mul_scalar expects a one-element factor, got {:?}",
                self.shape(s)
            )));
        }
        let c = self.value(s).data()[0];
        let xv = self.value(x);
        let out = Tensor::from_fn(xv.shape(), |i| xv.data()[i] * c);
        Ok(self.push(out, Op::MulScalar(x, s), &[x, s]))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = ops::relu(self.value(x));
        if self.kinks.is_some() {
            let signs: Vec<u64> = self.value(x).data().iter().map(|&v| u64::from(v > 0.0)).collect();
            self.mix_kinks(signs.into_iter());
        }
        self.push(out, Op::Relu(x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = ops::sigmoid(self.value(x));
        self.push(out, Op::Sigmoid(x), &[x])
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let out = ops::softmax(self.value(x), axis)?;
        Ok(self.push(out, Op::Softmax { x, axis }, &[x]))
    }

    /// Layer norm over the last axis.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let xv = self.value(x);
        let axis = xv.rank() - 1;
        let n = xv.shape()[axis];
        if self.value(gain).len() != n || self.value(bias).len() != n {
            return Err(Error::ShapeMismatch {
                op: "layer_norm",
                lhs: xv.shape().to_vec(),
                rhs: self.shape(gain).to_vec(),
            });
        }
        let (mut out, mean, rstd) = ops::normalize_axis(xv, axis)?;
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        for (i, v) in out.iter_mut().enumerate() {
            *v = *v * g[i % n] + b[i % n];
        }
        let out = Tensor::new(xv.shape(), out)?;
        Ok(self.push(out, Op::LayerNorm { x, gain, bias, mean, rstd }, &[x, gain, bias]))
    }

    pub fn conv2d(&mut self, x: Var, k: Var, stride: usize, padding: usize) -> Result<Var> {
        let geom = ConvGeometry::new(self.value(x), self.value(k), stride, padding)?;
        let out = ops::conv2d(self.value(x), self.value(k), stride, padding)?;
        Ok(self.push(out, Op::Conv2d { x, k, geom }, &[x, k]))
    }

    pub fn max_pool2d(&mut self, x: Var, window: usize, stride: usize) -> Result<Var> {
        let (out, arg) = ops::max_pool2d(self.value(x), window, stride)?;
        self.mix_kinks(arg.iter().map(|&i| i as u64));
        Ok(self.push(out, Op::MaxPool { x, arg }, &[x]))
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let out = ops::global_avg_pool(self.value(x))?;
        Ok(self.push(out, Op::GlobalAvgPool(x), &[x]))
    }

    /// `out[i] = x[index[i]]`, reshaped to `shape`.
    pub fn gather(&mut self, x: Var, index: Vec<usize>, shape: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        if let Some(&bad) = index.iter().find(|&&i| i >= xv.len()) {
            return Err(dim_err(format!("gather index {bad} out of range for {:?}", xv.shape())));
        }
        let data = index.iter().map(|&i| xv.data()[i]).collect();
        let out = Tensor::new(shape, data)?;
        Ok(self.push(out, Op::Gather { x, index }, &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        Ok(self.push(out, Op::Reshape(x), &[x]))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (m, n) = match self.shape(x) {
            [m, n] => (*m, *n),
            s => return Err(dim_err(format!("transpose expects rank 2, got {s:?}"))),
        };
        let index = (0..m * n).map(|i| (i % m) * n + i / m).collect();
        self.gather(x, index, &[n, m])
    }

    /// Columns `[start, start + width)` of a 2-D value.
    pub fn slice_cols(&mut self, x: Var, start: usize, width: usize) -> Result<Var> {
        let (m, n) = match self.shape(x) {
            [m, n] => (*m, *n),
            s => return Err(dim_err(format!("slice_cols expects rank 2, got {s:?}"))),
        };
        if start + width > n || width == 0 {
            return Err(dim_err(format!("columns {start}..{} out of range for width {n}", start + width)));
        }
        let index = (0..m * width).map(|i| (i / width) * n + start + i % width).collect();
        self.gather(x, index, &[m, width])
    }

    /// Rows `[start, start + count)` of a 2-D value.
    pub fn slice_rows(&mut self, x: Var, start: usize, count: usize) -> Result<Var> {
        let (m, n) = match self.shape(x) {
            [m, n] => (*m, *n),
            s => return Err(dim_err(format!("slice_rows expects rank 2, got {s:?}"))),
        };
        if start + count > m || count == 0 {
            return Err(dim_err(format!("rows {start}..{} out of range for {m}", start + count)));
        }
        self.gather(x, (start * n..(start + count) * n).collect(), &[count, n])
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let n = self.rank2_cols(parts, "concat_rows")?;
        let mut data = Vec::new();
        for &p in parts {
            data.extend_from_slice(self.value(p).data());
        }
        let rows = data.len() / n;
        let out = Tensor::new(&[rows, n], data)?;
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), parts))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let m = match parts.first().map(|&p| self.shape(p)) {
            Some([m, _]) => *m,
            _ => return Err(dim_err("concat_cols expects rank-2 parts")),
        };
        for &p in parts {
            match self.shape(p) {
                [r, _] if *r == m => {}
                s => return Err(dim_err(format!("concat_cols row mismatch: {m} vs {s:?}"))),
            }
        }
        let widths: Vec<usize> = parts.iter().map(|&p| self.shape(p)[1]).collect();
        let total: usize = widths.iter().sum();
        let mut data = vec![0.0; m * total];
        let mut off = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let src = self.value(p).data();
            for r in 0..m {
                data[r * total + off..r * total + off + w].copy_from_slice(&src[r * w..(r + 1) * w]);
            }
            off += w;
        }
        let out = Tensor::new(&[m, total], data)?;
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), parts))
    }

    fn rank2_cols(&self, parts: &[Var], op: &str) -> Result<usize> {
        let n = match parts.first().map(|&p| self.shape(p)) {
            Some([_, n]) => *n,
            _ => return Err(dim_err(format!("{op} expects rank-2 parts"))),
        };
        for &p in parts {
            match self.shape(p) {
                [_, c] if *c == n => {}
                s => return Err(dim_err(format!("{op} column mismatch: {n} vs {s:?}"))),
            }
        }
        Ok(n)
    }

    /// Multi-head scaled dot-product attention on pre-projected inputs.
    ///
    /// `q` is N×D, `k` and `v` are M×D; head `h` uses columns
    /// `h·D/heads .. (h+1)·D/heads`. Output columns are the concatenated
    /// heads, so the caller applies the output projection.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, label: &str) -> Result<Var> {
        let (n, d) = match self.shape(q) {
            [n, d] => (*n, *d),
            s => return Err(dim_err(format!("attention queries must be rank 2, got {s:?}"))),
        };
        let (m, dk_total) = match self.shape(k) {
            [m, d] => (*m, *d),
            s => return Err(dim_err(format!("attention keys must be rank 2, got {s:?}"))),
        };
        if dk_total != d || self.shape(v) != [m, d] {
            return Err(Error::ShapeMismatch {
                op: "attention",
                lhs: self.shape(q).to_vec(),
                rhs: self.shape(k).to_vec(),
            });
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::Config(format!(
                "embedding width {d} is not divisible by {heads} heads"
            )));
        }
        let dh = d / heads;
        let scale = 1.0 / math::sqrt(dh as f64);
        let keep = !self.no_grad && [q, k, v].iter().any(|&x| self.tracked(x));
        let capture = self.capture.is_some();
        let mut out = vec![0.0; n * d];
        let mut probs = if keep || capture { Vec::with_capacity(heads * n * m) } else { Vec::new() };
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut scores = vec![0.0; n * m];
        for h in 0..heads {
            let qh = head_cols(qd, n, d, h * dh, dh);
            let kh = head_cols(kd, m, d, h * dh, dh);
            let vh = head_cols(vd, m, d, h * dh, dh);
            scores.iter_mut().for_each(|s| *s = 0.0);
            ops::gemm_nt_acc(&qh, &kh, &mut scores, n, dh, m);
            scores.iter_mut().for_each(|s| *s *= scale);
            ops::softmax_rows_inplace(&mut scores, m);
            let mut oh = vec![0.0; n * dh];
            ops::gemm_acc(&scores, &vh, &mut oh, n, m, dh);
            for i in 0..n {
                out[i * d + h * dh..i * d + (h + 1) * dh].copy_from_slice(&oh[i * dh..(i + 1) * dh]);
            }
            if keep || capture {
                probs.extend_from_slice(&scores);
            }
        }
        if let Some(sink) = self.capture.as_mut() {
            sink.push(AttentionRecord {
                label: String::from(label),
                weights: Tensor::new(&[heads, n, m], probs.clone())?,
            });
        }
        if !keep {
            probs = Vec::new();
        }
        let out = Tensor::new(&[n, d], out)?;
        Ok(self.push(out, Op::Attention { q, k, v, heads, probs }, &[q, k, v]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let s = xv.data().iter().sum::<f64>() / xv.len() as f64;
        self.push(Tensor::scalar(s), Op::Mean(x), &[x])
    }

    /// Binary cross-entropy of a single probability against `target` ∈ [0,1].
    pub fn bce(&mut self, p: Var, target: f64) -> Result<Var> {
        if self.value(p).len() != 1 {
            return Err(dim_err(format!("bce expects one probability, got {:?}", self.shape(p))));
        }
        let pv = self.value(p).data()[0].clamp(BCE_EPS, 1.0 - BCE_EPS);
        let loss = -(target * math::ln(pv) + (1.0 - target) * math::ln(1.0 - pv));
        Ok(self.push(Tensor::scalar(loss), Op::Bce { p, target }, &[p]))
    }

    /// Back-propagates from a one-element `loss`, consuming the tape.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::new();
        grads.resize_with(self.nodes.len(), || None);
        if !self.tracked(loss) {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop(node, &g, &mut grads);
        }
        Ok(Gradients { grads })
    }

    fn backprop(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |v: Var| self.nodes[v.0].value.data();
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !self.nodes[v.0].tracked {
                return;
            }
            let n = self.nodes[v.0].value.len();
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; n]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                acc(*a, &mut |da| ops::gemm_nt_acc(g, val(*b), da, m, n, k));
                acc(*b, &mut |db| ops::gemm_tn_acc(val(*a), g, db, k, m, n));
            }
            Op::Add(a, b) => {
                acc(*a, &mut |d| add_into(d, g));
                acc(*b, &mut |d| add_into(d, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |d| add_into(d, g));
                acc(*b, &mut |d| d.iter_mut().zip(g).for_each(|(x, y)| *x -= y));
            }
            Op::Mul(a, b) => {
                acc(*a, &mut |d| {
                    for ((x, gy), bv) in d.iter_mut().zip(g).zip(val(*b)) {
                        *x += gy * bv;
                    }
                });
                acc(*b, &mut |d| {
                    for ((x, gy), av) in d.iter_mut().zip(g).zip(val(*a)) {
                        *x += gy * av;
                    }
                });
            }
            Op::AddRow(x, b) => {
                acc(*x, &mut |d| add_into(d, g));
                acc(*b, &mut |d| {
                    let n = d.len();
                    for (i, gy) in g.iter().enumerate() {
                        d[i % n] += gy;
                    }
                });
            }
            Op::Scale(x, c) => acc(*x, &mut |d| d.iter_mut().zip(g).for_each(|(a, gy)| *a += gy * c)),
            Op::MulScalar(x, s) => {
                let c = val(*s)[0];
                acc(*x, &mut |d| d.iter_mut().zip(g).for_each(|(a, gy)| *a += gy * c));
                acc(*s, &mut |d| d[0] += g.iter().zip(val(*x)).map(|(a, b)| a * b).sum::<f64>());
            }
            Op::Relu(x) => acc(*x, &mut |d| {
                for ((a, gy), xv) in d.iter_mut().zip(g).zip(val(*x)) {
                    if *xv > 0.0 {
                        *a += gy;
                    }
                }
            }),
            Op::Sigmoid(x) => {
                let y = node.value.data();
                acc(*x, &mut |d| {
                    for ((a, gy), yv) in d.iter_mut().zip(g).zip(y) {
                        *a += gy * yv * (1.0 - yv);
                    }
                });
            }
            Op::Softmax { x, axis } => {
                let y = node.value.data();
                let (outer, len, inner) = ops::axis_split(node.value.shape(), *axis).expect("recorded axis");
                acc(*x, &mut |d| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let base = o * len * inner + i;
                            let dot: f64 = (0..len).map(|j| g[base + j * inner] * y[base + j * inner]).sum();
                            for j in 0..len {
                                let idx = base + j * inner;
                                d[idx] += y[idx] * (g[idx] - dot);
                            }
                        }
                    }
                });
            }
            Op::LayerNorm { x, gain, bias, mean, rstd } => {
                let n = *self.shape(*x).last().expect("rank ≥ 1");
                let xv = val(*x);
                let gv = val(*gain);
                acc(*bias, &mut |d| {
                    for (i, gy) in g.iter().enumerate() {
                        d[i % n] += gy;
                    }
                });
                acc(*gain, &mut |d| {
                    for (i, gy) in g.iter().enumerate() {
                        let r = i / n;
                        d[i % n] += gy * (xv[i] - mean[r]) * rstd[r];
                    }
                });
                acc(*x, &mut |d| {
                    for (r, (&mu, &rs)) in mean.iter().zip(rstd).enumerate() {
                        let row = r * n..(r + 1) * n;
                        let xhat: Vec<f64> = xv[row.clone()].iter().map(|v| (v - mu) * rs).collect();
                        let gh: Vec<f64> = g[row.clone()].iter().zip(gv).map(|(a, b)| a * b).collect();
                        let m1 = gh.iter().sum::<f64>() / n as f64;
                        let m2 = gh.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                        for (j, dx) in d[row].iter_mut().enumerate() {
                            *dx += rs * (gh[j] - m1 - xhat[j] * m2);
                        }
                    }
                });
            }
            Op::Conv2d { x, k, geom } => {
                acc(*x, &mut |d| conv2d_input_grad(geom, val(*k), g, d));
                acc(*k, &mut |d| conv2d_kernel_grad(geom, val(*x), g, d));
            }
            Op::MaxPool { x, arg } => acc(*x, &mut |d| {
                for (gy, &src) in g.iter().zip(arg) {
                    d[src] += gy;
                }
            }),
            Op::GlobalAvgPool(x) => {
                let c = g.len();
                let hw = self.nodes[x.0].value.len() / c;
                let inv = 1.0 / hw as f64;
                acc(*x, &mut |d| {
                    for (i, dx) in d.iter_mut().enumerate() {
                        *dx += g[i % c] * inv;
                    }
                });
            }
            Op::Gather { x, index } => acc(*x, &mut |d| {
                for (gy, &src) in g.iter().zip(index) {
                    d[src] += gy;
                }
            }),
            Op::Reshape(x) => acc(*x, &mut |d| add_into(d, g)),
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = self.nodes[p.0].value.len();
                    acc(p, &mut |d| add_into(d, &g[off..off + len]));
                    off += len;
                }
            }
            Op::ConcatCols(parts) => {
                let total = node.value.shape()[1];
                let mut off = 0;
                for &p in parts {
                    let (m, w) = (self.shape(p)[0], self.shape(p)[1]);
                    acc(p, &mut |d| {
                        for r in 0..m {
                            add_into(&mut d[r * w..(r + 1) * w], &g[r * total + off..r * total + off + w]);
                        }
                    });
                    off += w;
                }
            }
            Op::Attention { q, k, v, heads, probs } => {
                self.attention_backward(*q, *k, *v, *heads, probs, g, grads);
            }
            Op::Sum(x) => acc(*x, &mut |d| d.iter_mut().for_each(|a| *a += g[0])),
            Op::Mean(x) => {
                let inv = g[0] / self.nodes[x.0].value.len() as f64;
                acc(*x, &mut |d| d.iter_mut().for_each(|a| *a += inv));
            }
            Op::Bce { p, target } => {
                let pv = val(*p)[0];
                let grad = if pv <= BCE_EPS || pv >= 1.0 - BCE_EPS {
                    0.0
                } else {
                    (pv - target) / (pv * (1.0 - pv))
                };
                acc(*p, &mut |d| d[0] += g[0] * grad);
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: &[f64],
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let (n, d) = (self.shape(q)[0], self.shape(q)[1]);
        let m = self.shape(k)[0];
        let dh = d / heads;
        let scale = 1.0 / math::sqrt(dh as f64);
        let (qd, kd, vd) = (
            self.nodes[q.0].value.data(),
            self.nodes[k.0].value.data(),
            self.nodes[v.0].value.data(),
        );
        let mut dq = vec![0.0; n * d];
        let mut dk = vec![0.0; m * d];
        let mut dv = vec![0.0; m * d];
        for h in 0..heads {
            let p = &probs[h * n * m..(h + 1) * n * m];
            let qh = head_cols(qd, n, d, h * dh, dh);
            let kh = head_cols(kd, m, d, h * dh, dh);
            let vh = head_cols(vd, m, d, h * dh, dh);
            let go = head_cols(g, n, d, h * dh, dh);
            // dV = Pᵀ·dO
            let mut dvh = vec![0.0; m * dh];
            ops::gemm_tn_acc(p, &go, &mut dvh, m, n, dh);
            // dP = dO·Vᵀ, then through the row softmax
            let mut ds = vec![0.0; n * m];
            ops::gemm_nt_acc(&go, &vh, &mut ds, n, dh, m);
            for i in 0..n {
                let row = &mut ds[i * m..(i + 1) * m];
                let prow = &p[i * m..(i + 1) * m];
                let dot: f64 = row.iter().zip(prow).map(|(a, b)| a * b).sum();
                for (s, pv) in row.iter_mut().zip(prow) {
                    *s = pv * (*s - dot) * scale;
                }
            }
            let mut dqh = vec![0.0; n * dh];
            ops::gemm_acc(&ds, &kh, &mut dqh, n, m, dh);
            let mut dkh = vec![0.0; m * dh];
            ops::gemm_tn_acc(&ds, &qh, &mut dkh, m, n, dh);
            scatter_cols(&mut dq, &dqh, n, d, h * dh, dh);
            scatter_cols(&mut dk, &dkh, m, d, h * dh, dh);
            scatter_cols(&mut dv, &dvh, m, d, h * dh, dh);
        }
        for (var, delta) in [(q, dq), (k, dk), (v, dv)] {
            if !self.nodes[var.0].tracked {
                continue;
            }
            let slot = grads[var.0].get_or_insert_with(|| vec![0.0; delta.len()]);
            add_into(slot, &delta);
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (a, b) in dst.iter_mut().zip(src) {
        *a += b;
    }
}

fn head_cols(src: &[f64], rows: usize, width: usize, start: usize, dh: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(rows * dh);
    for r in 0..rows {
        out.extend_from_slice(&src[r * width + start..r * width + start + dh]);
    }
    out
}

fn scatter_cols(dst: &mut [f64], src: &[f64], rows: usize, width: usize, start: usize, dh: usize) {
    for r in 0..rows {
        add_into(&mut dst[r * width + start..r * width + start + dh], &src[r * dh..(r + 1) * dh]);
    }
}

fn conv2d_input_grad(g: &ConvGeometry, kernels: &[f64], gout: &[f64], dx: &mut [f64]) {
    let (cin, cout) = (g.c_in, g.c_out);
    for oy in 0..g.out_h {
        for ox in 0..g.out_w {
            let grow = &gout[(oy * g.out_w + ox) * cout..][..cout];
            for m in 0..g.k {
                let Some(iy) = g.src(oy, m, g.in_h) else { continue };
                for n in 0..g.k {
                    let Some(ix) = g.src(ox, n, g.in_w) else { continue };
                    let kbase = (m * g.k + n) * cin * cout;
                    let px = &mut dx[(iy * g.in_w + ix) * cin..][..cin];
                    for (c, d) in px.iter_mut().enumerate() {
                        let krow = &kernels[kbase + c * cout..][..cout];
                        *d += krow.iter().zip(grow).map(|(a, b)| a * b).sum::<f64>();
                    }
                }
            }
        }
    }
}

fn conv2d_kernel_grad(g: &ConvGeometry, input: &[f64], gout: &[f64], dk: &mut [f64]) {
    let (cin, cout) = (g.c_in, g.c_out);
    for oy in 0..g.out_h {
        for ox in 0..g.out_w {
            let grow = &gout[(oy * g.out_w + ox) * cout..][..cout];
            for m in 0..g.k {
                let Some(iy) = g.src(oy, m, g.in_h) else { continue };
                for n in 0..g.k {
                    let Some(ix) = g.src(ox, n, g.in_w) else { continue };
                    let kbase = (m * g.k + n) * cin * cout;
                    let px = &input[(iy * g.in_w + ix) * cin..][..cin];
                    for (c, &v) in px.iter().enumerate() {
                        if v == 0.0 {
                            continue;
                        }
                        let krow = &mut dk[kbase + c * cout..][..cout];
                        for (kd, gy) in krow.iter_mut().zip(grow) {
                            *kd += v * gy;
                        }
                    }
                }
            }
        }
    }
}
