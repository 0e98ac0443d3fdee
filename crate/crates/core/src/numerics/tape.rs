//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every operation appends a node holding its output value and enough
//! cached state to run its vector-Jacobian product. Nodes are only ever
//! appended, so the tape is already in topological order and `backward`
//! is a single reverse sweep.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::numerics::tensor::{gemm_nt, gemm_tn};
use crate::numerics::{ParamId, ParamSet, Tensor};

/// Variance epsilon used by [`Tape::layer_norm`].
pub const LAYER_NORM_EPS: f64 = 1e-6;

/// Additive constant applied to blocked logits before the softmax; blocked
/// probabilities are then clamped to exactly zero.
pub const MASK_NEG: f64 = -1e9;

static NO_PARAMS: ParamSet = ParamSet::new();

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// Visibility pattern for attention scores, `visible(query, key)`.
#[derive(Clone, Debug)]
pub enum AttnMask {
    Full,
    /// Query `i` sees keys `0..=i`.
    Causal,
    /// Query `i` sees keys `i..`.
    AntiCausal,
    /// Row-major `[queries x keys]`, `true` = visible.
    Explicit(Arc<[bool]>),
}

impl AttnMask {
    #[inline]
    pub fn visible(&self, i: usize, j: usize, keys: usize) -> bool {
        match self {
            AttnMask::Full => true,
            AttnMask::Causal => j <= i,
            AttnMask::AntiCausal => j >= i,
            AttnMask::Explicit(m) => m[i * keys + j],
        }
    }
}

enum Value {
    Owned(Tensor),
    Param(ParamId),
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Sum(Var),
    Mean(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    MaskedSoftmax(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: Vec<f64>,
    },
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    Gather(Var, Vec<usize>),
    SegmentMean(Var, Arc<[Vec<usize>]>),
}

struct Node {
    value: Value,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by [`Tape::backward`].
pub struct Gradients {
    nodes: Vec<Option<Tensor>>,
    params: Vec<(ParamId, Tensor)>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. a node, `None` if the node does not
    /// require gradients or is unreachable from the loss.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.nodes.get(v.0).and_then(Option::as_ref)
    }

    /// Accumulated gradient for every parameter that reached the loss.
    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.params.iter().map(|(id, t)| (*id, t))
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.iter().find(|(p, _)| *p == id).map(|(_, t)| t)
    }
}

/// A single forward recording. Confined to one thread; borrows the
/// parameter set it reads from.
pub struct Tape<'p> {
    params: &'p ParamSet,
    nodes: Vec<Node>,
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::Shape {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

fn matrix_dims(t: &Tensor) -> (usize, usize) {
    (t.rows(), t.cols())
}

impl Default for Tape<'static> {
    fn default() -> Self {
        Self::without_params()
    }
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamSet) -> Self {
        Self {
            params,
            nodes: Vec::with_capacity(256),
        }
    }

    pub fn without_params() -> Tape<'static> {
        Tape::new(&NO_PARAMS)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        match &self.nodes[v.0].value {
            Value::Owned(t) => t,
            Value::Param(id) => self.params.value(*id),
        }
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        debug_assert!(value.is_finite(), "non-finite value produced on tape");
        self.nodes.push(Node {
            value: Value::Owned(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a leaf. Leaves with `requires_grad` receive gradients.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// References a trainable parameter without copying it.
    pub fn param(&mut self, id: ParamId) -> Var {
        self.nodes.push(Node {
            value: Value::Param(id),
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape().len() != 2 || tb.shape().len() != 2 || ta.cols() != tb.rows() {
            return Err(shape_err("matmul", ta, tb));
        }
        let out = ta.matmul(tb)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    fn zip_same(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err(name, ta, tb));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| f(*x, *y)).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// `a[n x d] + b[d]` with `b` broadcast over rows.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if tb.len() != ta.cols() {
            return Err(shape_err("add_row", ta, tb));
        }
        let d = ta.cols();
        let mut data = ta.data().to_vec();
        for row in data.chunks_mut(d) {
            for (x, y) in row.iter_mut().zip(tb.data()) {
                *x += y;
            }
        }
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::AddRow(a, b), rg))
    }

    fn map(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let ta = self.value(a);
        let data = ta.data().iter().map(|x| f(*x)).collect();
        let out = Tensor::new(ta.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(a);
        self.push(out, op, rg)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.map(a, |x| x * c, Op::Scale(a, c))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.map(a, f64::tanh, Op::Tanh(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.map(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s = t.data().iter().sum::<f64>() / t.len() as f64;
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Mean(a), rg)
    }

    /// Row-wise layer normalization with affine `gain`/`bias` of length `d`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (tx, tg, tb) = (self.value(x), self.value(gain), self.value(bias));
        let d = tx.cols();
        if tg.len() != d {
            return Err(shape_err("layer_norm gain", tx, tg));
        }
        if tb.len() != d {
            return Err(shape_err("layer_norm bias", tx, tb));
        }
        let rows = tx.rows();
        let mut xhat = vec![0.0; rows * d];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; rows * d];
        for r in 0..rows {
            let row = tx.row(r);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[r] = is;
            for c in 0..d {
                let h = (row[c] - mean) * is;
                xhat[r * d + c] = h;
                out[r * d + c] = tg.data()[c] * h + tb.data()[c];
            }
        }
        let out = Tensor::new(tx.shape().to_vec(), out)?;
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// Softmax over the last dimension; `mask[i] == false` blocks entry `i`.
    /// Blocked entries get probability exactly 0.
    pub fn masked_softmax(&mut self, logits: Var, mask: &[bool]) -> Result<Var> {
        let t = self.value(logits);
        if mask.len() != t.len() {
            return Err(Error::Shape {
                op: "masked_softmax",
                left: t.shape().to_vec(),
                right: vec![mask.len()],
            });
        }
        let d = t.cols();
        let mut out = vec![0.0; t.len()];
        for r in 0..t.rows() {
            softmax_row(
                t.row(r),
                &mask[r * d..(r + 1) * d],
                &mut out[r * d..(r + 1) * d],
            )
            .ok_or(Error::InvalidMask { row: r })?;
        }
        let out = Tensor::new(t.shape().to_vec(), out)?;
        let rg = self.rg(logits);
        Ok(self.push(out, Op::MaskedSoftmax(logits), rg))
    }

    /// Mean over rows of `-log softmax(logits[i])[targets[i]]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let t = self.value(logits);
        let (l, v) = matrix_dims(t);
        if targets.len() != l {
            return Err(Error::Shape {
                op: "cross_entropy",
                left: t.shape().to_vec(),
                right: vec![targets.len()],
            });
        }
        let mut probs = vec![0.0; l * v];
        let mut loss = 0.0;
        for (r, &target) in targets.iter().enumerate() {
            if target >= v {
                return Err(Error::Index {
                    op: "cross_entropy",
                    index: target,
                    size: v,
                });
            }
            let row = t.row(r);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = row.iter().map(|x| (x - max).exp()).sum();
            let lse = max + sum.ln();
            loss += lse - row[target];
            for c in 0..v {
                probs[r * v + c] = (row[c] - lse).exp();
            }
        }
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(loss / l as f64),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Multi-head scaled dot-product attention. `q` is `[Lq x d]`, `k` and
    /// `v` are `[Lk x d]`; `d` is split into `heads` contiguous slices and
    /// scores are scaled by `1/sqrt(d/heads)`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, mask: AttnMask) -> Result<Var> {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        let (lq, d) = matrix_dims(tq);
        let lk = tk.rows();
        if tk.cols() != d || tv.cols() != d || tv.rows() != lk {
            return Err(shape_err("attention", tq, tk));
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::Contract(format!(
                "attention width {d} is not divisible by {heads} heads"
            )));
        }
        if let AttnMask::Explicit(m) = &mask {
            if m.len() != lq * lk {
                return Err(Error::Shape {
                    op: "attention mask",
                    left: vec![lq, lk],
                    right: vec![m.len()],
                });
            }
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qd, kd, vd) = (tq.data(), tk.data(), tv.data());
        let mut probs = vec![0.0; heads * lq * lk];
        let mut out = vec![0.0; lq * d];
        let mut scores = vec![0.0; lk];
        let mut vis = vec![false; lk];
        for h in 0..heads {
            let off = h * dh;
            for i in 0..lq {
                let qi = &qd[i * d + off..i * d + off + dh];
                for j in 0..lk {
                    vis[j] = mask.visible(i, j, lk);
                    scores[j] = if vis[j] {
                        let kj = &kd[j * d + off..j * d + off + dh];
                        qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale
                    } else {
                        0.0
                    };
                }
                let p = &mut probs[(h * lq + i) * lk..(h * lq + i + 1) * lk];
                softmax_row(&scores, &vis, p).ok_or(Error::InvalidMask { row: i })?;
                let orow = &mut out[i * d + off..i * d + off + dh];
                for j in 0..lk {
                    let pj = p[j];
                    if pj == 0.0 {
                        continue;
                    }
                    let vj = &vd[j * d + off..j * d + off + dh];
                    for (o, x) in orow.iter_mut().zip(vj) {
                        *o += pj * x;
                    }
                }
            }
        }
        let out = Tensor::new(vec![lq, d], out)?;
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        Ok(self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            },
            rg,
        ))
    }

    /// Columns `start..start+len` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        let (r, c) = matrix_dims(t);
        if len == 0 || start + len > c {
            return Err(Error::Index {
                op: "slice_cols",
                index: start + len,
                size: c,
            });
        }
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&t.row(i)[start..start + len]);
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(vec![r, len], data)?, Op::SliceCols(x, start), rg))
    }

    /// Rows `start..start+len` of a matrix.
    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        let (r, c) = matrix_dims(t);
        if len == 0 || start + len > r {
            return Err(Error::Index {
                op: "slice_rows",
                index: start + len,
                size: r,
            });
        }
        let data = t.data()[start * c..(start + len) * c].to_vec();
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(vec![len, c], data)?, Op::SliceRows(x, start), rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.value(*parts.first().ok_or_else(|| Error::Contract("concat of nothing".into()))?);
        let rows = first.rows();
        let mut cols = 0;
        for &p in parts {
            let t = self.value(p);
            if t.rows() != rows {
                return Err(shape_err("concat_cols", first, t));
            }
            cols += t.cols();
        }
        let mut data = vec![0.0; rows * cols];
        let mut off = 0;
        for &p in parts {
            let t = self.value(p);
            let c = t.cols();
            for i in 0..rows {
                data[i * cols + off..i * cols + off + c].copy_from_slice(t.row(i));
            }
            off += c;
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Tensor::new(vec![rows, cols], data)?, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.value(*parts.first().ok_or_else(|| Error::Contract("concat of nothing".into()))?);
        let cols = first.cols();
        let mut data = Vec::new();
        for &p in parts {
            let t = self.value(p);
            if t.cols() != cols {
                return Err(shape_err("concat_rows", first, t));
            }
            data.extend_from_slice(t.data());
        }
        let rows = data.len() / cols;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Tensor::new(vec![rows, cols], data)?, Op::ConcatRows(parts.to_vec()), rg))
    }

    /// Row lookup: `out[i] = table[ids[i]]`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        let (v, d) = matrix_dims(t);
        if ids.is_empty() {
            return Err(Error::Contract("gather with no ids".into()));
        }
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(Error::Index {
                    op: "gather",
                    index: id,
                    size: v,
                });
            }
            data.extend_from_slice(t.row(id));
        }
        let rg = self.rg(table);
        Ok(self.push(Tensor::new(vec![ids.len(), d], data)?, Op::Gather(table, ids.to_vec()), rg))
    }

    /// `out[i] = mean_{j in groups[i]} x[j]`, i.e. a row-normalized sparse
    /// matrix product. Each group must be non-empty.
    pub fn segment_mean(&mut self, x: Var, groups: Arc<[Vec<usize>]>) -> Result<Var> {
        let t = self.value(x);
        let out = segment_mean_kernel(t, &groups)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::SegmentMean(x, groups), rg))
    }

    /// Reverse sweep from a scalar `loss`. Consumes the tape.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }

        let mut params: Vec<(ParamId, Tensor)> = Vec::new();
        let mut out = Vec::with_capacity(n);
        for (idx, g) in grads.into_iter().enumerate() {
            let node = &self.nodes[idx];
            let t = match g {
                Some(g) if node.requires_grad => {
                    let shape = self.value(Var(idx)).shape().to_vec();
                    Some(Tensor::new(shape, g)?)
                }
                _ => None,
            };
            if let (Value::Param(id), Some(t)) = (&node.value, &t) {
                match params.iter_mut().find(|(p, _)| p == id) {
                    Some((_, acc)) => acc
                        .data_mut()
                        .iter_mut()
                        .zip(t.data())
                        .for_each(|(a, b)| *a += b),
                    None => params.push((*id, t.clone())),
                }
            }
            out.push(t);
        }
        Ok(Gradients { nodes: out, params })
    }

    fn backprop_node(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let out = self.value(Var(idx));
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (n, k) = matrix_dims(ta);
                let m = tb.cols();
                self.acc(grads, *a, |ga| gemm_nt(g, tb.data(), ga, n, m, k));
                self.acc(grads, *b, |gb| gemm_tn(ta.data(), g, gb, n, k, m));
            }
            Op::Add(a, b) => {
                self.acc(grads, *a, |ga| add_into(ga, g));
                self.acc(grads, *b, |gb| add_into(gb, g));
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, |ga| add_into(ga, g));
                self.acc(grads, *b, |gb| gb.iter_mut().zip(g).for_each(|(x, y)| *x -= y));
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                self.acc(grads, *a, |ga| {
                    for ((x, y), z) in ga.iter_mut().zip(g).zip(tb.data()) {
                        *x += y * z;
                    }
                });
                self.acc(grads, *b, |gb| {
                    for ((x, y), z) in gb.iter_mut().zip(g).zip(ta.data()) {
                        *x += y * z;
                    }
                });
            }
            Op::AddRow(a, b) => {
                let d = self.value(*b).len();
                self.acc(grads, *a, |ga| add_into(ga, g));
                self.acc(grads, *b, |gb| {
                    for row in g.chunks(d) {
                        add_into(gb, row);
                    }
                });
            }
            Op::Scale(a, c) => {
                self.acc(grads, *a, |ga| ga.iter_mut().zip(g).for_each(|(x, y)| *x += c * y));
            }
            Op::Sigmoid(a) => {
                self.acc(grads, *a, |ga| {
                    for ((x, y), s) in ga.iter_mut().zip(g).zip(out.data()) {
                        *x += y * s * (1.0 - s);
                    }
                });
            }
            Op::Tanh(a) => {
                self.acc(grads, *a, |ga| {
                    for ((x, y), t) in ga.iter_mut().zip(g).zip(out.data()) {
                        *x += y * (1.0 - t * t);
                    }
                });
            }
            Op::Relu(a) => {
                let ta = self.value(*a);
                self.acc(grads, *a, |ga| {
                    for ((x, y), v) in ga.iter_mut().zip(g).zip(ta.data()) {
                        if *v > 0.0 {
                            *x += y;
                        }
                    }
                });
            }
            Op::Sum(a) => self.acc(grads, *a, |ga| ga.iter_mut().for_each(|x| *x += g[0])),
            Op::Mean(a) => {
                let n = self.value(*a).len() as f64;
                self.acc(grads, *a, |ga| ga.iter_mut().for_each(|x| *x += g[0] / n));
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let tg = self.value(*gain).data();
                let d = tg.len();
                self.acc(grads, *gain, |gg| {
                    for (gr, hr) in g.chunks(d).zip(xhat.chunks(d)) {
                        for c in 0..d {
                            gg[c] += gr[c] * hr[c];
                        }
                    }
                });
                self.acc(grads, *bias, |gb| {
                    for gr in g.chunks(d) {
                        add_into(gb, gr);
                    }
                });
                self.acc(grads, *x, |gx| {
                    let mut dxhat = vec![0.0; d];
                    for (r, (gr, hr)) in g.chunks(d).zip(xhat.chunks(d)).enumerate() {
                        let mut s1 = 0.0;
                        let mut s2 = 0.0;
                        for c in 0..d {
                            dxhat[c] = gr[c] * tg[c];
                            s1 += dxhat[c];
                            s2 += dxhat[c] * hr[c];
                        }
                        let k = inv_std[r] / d as f64;
                        let gxr = &mut gx[r * d..(r + 1) * d];
                        for c in 0..d {
                            gxr[c] += k * (d as f64 * dxhat[c] - s1 - hr[c] * s2);
                        }
                    }
                });
            }
            Op::MaskedSoftmax(a) => {
                let d = out.cols();
                self.acc(grads, *a, |ga| {
                    for ((gr, yr), xr) in g.chunks(d).zip(out.data().chunks(d)).zip(ga.chunks_mut(d)) {
                        let dot: f64 = gr.iter().zip(yr).map(|(p, q)| p * q).sum();
                        for c in 0..d {
                            xr[c] += yr[c] * (gr[c] - dot);
                        }
                    }
                });
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let l = targets.len();
                let v = probs.len() / l;
                let s = g[0] / l as f64;
                self.acc(grads, *logits, |gl| {
                    for (r, &t) in targets.iter().enumerate() {
                        for c in 0..v {
                            gl[r * v + c] += s * probs[r * v + c];
                        }
                        gl[r * v + t] -= s;
                    }
                });
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            } => self.attention_backward(*q, *k, *v, *heads, probs, g, grads),
            Op::SliceCols(x, start) => {
                let c = self.value(*x).cols();
                let len = out.cols();
                self.acc(grads, *x, |gx| {
                    for (i, gr) in g.chunks(len).enumerate() {
                        add_into(&mut gx[i * c + start..i * c + start + len], gr);
                    }
                });
            }
            Op::SliceRows(x, start) => {
                let c = out.cols();
                self.acc(grads, *x, |gx| add_into(&mut gx[start * c..start * c + g.len()], g));
            }
            Op::ConcatCols(parts) => {
                let cols = out.cols();
                let mut off = 0;
                for &p in parts {
                    let c = self.value(p).cols();
                    self.acc(grads, p, |gp| {
                        for (i, gr) in gp.chunks_mut(c).enumerate() {
                            add_into(gr, &g[i * cols + off..i * cols + off + c]);
                        }
                    });
                    off += c;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    self.acc(grads, p, |gp| add_into(gp, &g[off..off + n]));
                    off += n;
                }
            }
            Op::Gather(table, ids) => {
                let d = out.cols();
                self.acc(grads, *table, |gt| {
                    for (i, &id) in ids.iter().enumerate() {
                        add_into(&mut gt[id * d..(id + 1) * d], &g[i * d..(i + 1) * d]);
                    }
                });
            }
            Op::SegmentMean(x, groups) => {
                let d = out.cols();
                self.acc(grads, *x, |gx| {
                    for (i, grp) in groups.iter().enumerate() {
                        let w = 1.0 / grp.len() as f64;
                        for &j in grp {
                            for c in 0..d {
                                gx[j * d + c] += w * g[i * d + c];
                            }
                        }
                    }
                });
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
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        let (lq, d) = matrix_dims(tq);
        let lk = tk.rows();
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qd, kd, vd) = (tq.data(), tk.data(), tv.data());
        let mut dq = vec![0.0; lq * d];
        let mut dk = vec![0.0; lk * d];
        let mut dv = vec![0.0; lk * d];
        let mut dp = vec![0.0; lk];
        for h in 0..heads {
            let off = h * dh;
            for i in 0..lq {
                let p = &probs[(h * lq + i) * lk..(h * lq + i + 1) * lk];
                let gi = &g[i * d + off..i * d + off + dh];
                let mut dot = 0.0;
                for j in 0..lk {
                    if p[j] == 0.0 {
                        dp[j] = 0.0;
                        continue;
                    }
                    let vj = &vd[j * d + off..j * d + off + dh];
                    dp[j] = gi.iter().zip(vj).map(|(a, b)| a * b).sum();
                    dot += p[j] * dp[j];
                    for (x, y) in dv[j * d + off..j * d + off + dh].iter_mut().zip(gi) {
                        *x += p[j] * y;
                    }
                }
                let qi = &qd[i * d + off..i * d + off + dh];
                for j in 0..lk {
                    if p[j] == 0.0 {
                        continue;
                    }
                    let ds = p[j] * (dp[j] - dot) * scale;
                    let kj = &kd[j * d + off..j * d + off + dh];
                    for (x, y) in dq[i * d + off..i * d + off + dh].iter_mut().zip(kj) {
                        *x += ds * y;
                    }
                    for (x, y) in dk[j * d + off..j * d + off + dh].iter_mut().zip(qi) {
                        *x += ds * y;
                    }
                }
            }
        }
        self.acc(grads, q, |gq| add_into(gq, &dq));
        self.acc(grads, k, |gk| add_into(gk, &dk));
        self.acc(grads, v, |gv| add_into(gv, &dv));
    }

    fn acc(&self, grads: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.value(v).len()]);
        f(slot);
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (x, y) in dst.iter_mut().zip(src) {
        *x += y;
    }
}

/// Logistic function.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Stable masked softmax of one row into `out`. Returns `None` when every
/// entry is blocked.
fn softmax_row(x: &[f64], visible: &[bool], out: &mut [f64]) -> Option<()> {
    let mut max = f64::NEG_INFINITY;
    for (v, &ok) in x.iter().zip(visible) {
        let shifted = if ok { *v } else { *v + MASK_NEG };
        if ok && shifted > max {
            max = shifted;
        }
    }
    if max == f64::NEG_INFINITY {
        return None;
    }
    let mut sum = 0.0;
    for ((o, v), &ok) in out.iter_mut().zip(x).zip(visible) {
        *o = if ok { (v - max).exp() } else { 0.0 };
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
    Some(())
}

/// Plain masked softmax over the last dimension, outside any tape.
pub fn masked_softmax(logits: &Tensor, mask: &[bool]) -> Result<Tensor> {
    let mut tape = Tape::without_params();
    let x = tape.constant(logits.clone());
    let y = tape.masked_softmax(x, mask)?;
    Ok(tape.value(y).clone())
}

pub(crate) fn segment_mean_kernel(x: &Tensor, groups: &[Vec<usize>]) -> Result<Tensor> {
    let (r, d) = matrix_dims(x);
    let mut out = vec![0.0; groups.len() * d];
    for (i, grp) in groups.iter().enumerate() {
        if grp.is_empty() {
            return Err(Error::Contract(format!("segment {i} is empty")));
        }
        let orow = &mut out[i * d..(i + 1) * d];
        for &j in grp {
            if j >= r {
                return Err(Error::Index {
                    op: "segment_mean",
                    index: j,
                    size: r,
                });
            }
            add_into(orow, x.row(j));
        }
        let n = grp.len() as f64;
        orow.iter_mut().for_each(|v| *v /= n);
    }
    Tensor::new(vec![groups.len().max(1), d], out)
}
