//! Reverse-mode differentiation over a per-forward-pass tape.
//!
//! A [`Tape`] records every operation of one forward pass as a node holding
//! its value and the handles of its inputs. [`Tape::backward`] walks the nodes
//! in reverse insertion order, which is a valid reverse topological order
//! because a node can only reference nodes recorded before it.
//!
//! Parameters enter the tape through [`Tape::param`]; they require a gradient
//! when trainable, or always when the tape is built with
//! [`Tape::with_all_grads`].

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::param::{Grads, ParamId, ParamStore};
use crate::tensor::{gemm, MatRef, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// Shape metadata for the fused masked attention op.
#[derive(Debug, Clone)]
pub struct AttentionLayout {
    pub batch: usize,
    pub seq: usize,
    pub heads: usize,
    /// `batch * seq` flags, true for real (non-padding) positions.
    pub mask: Arc<Vec<bool>>,
}

enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    AddRowBias(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    SoftmaxRows(Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        layout: AttentionLayout,
        probs: Vec<f64>,
    },
    GatherRows {
        table: Var,
        indices: Vec<usize>,
    },
    Sum(Var),
    SquaredErrorSum {
        pred: Var,
        target: Vec<f64>,
    },
    CrossEntropySum {
        logits: Var,
        targets: Vec<Option<usize>>,
        probs: Vec<f64>,
    },
    Mix {
        x: Var,
        y: Var,
        a: Var,
        b: Var,
        w: f64,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

pub struct Tape {
    nodes: Vec<Node>,
    grad_all: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    for x in row.iter_mut() {
        *x /= total;
    }
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(x: &Tensor) -> Result<Tensor> {
    let (_, n) = x.dims2()?;
    let mut out = x.data().to_vec();
    for row in out.chunks_mut(n) {
        softmax_in_place(row);
    }
    Tensor::new(x.shape().to_vec(), out)
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grad_all: false,
        }
    }

    /// A tape on which frozen parameters also receive gradients.
    pub fn with_all_grads() -> Self {
        Self {
            nodes: Vec::new(),
            grad_all: true,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let p = store.get(id);
        let rg = p.trainable || self.grad_all;
        self.push(p.value.clone(), Op::Param(id), rg)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(Error::Shape(format!(
                "add needs equal shapes: {:?} vs {:?}",
                x.shape(),
                y.shape()
            )));
        }
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p + q).collect();
        let out = Tensor::new(x.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    /// Adds a length-`n` bias to every row of an `m×n` matrix.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (_, n) = self.value(x).dims2()?;
        if self.value(bias).len() != n {
            return Err(Error::Shape(format!(
                "bias of shape {:?} does not match rows of {:?}",
                self.value(bias).shape(),
                self.value(x).shape()
            )));
        }
        let b = self.value(bias).data();
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_mut(n) {
            for (o, bb) in row.iter_mut().zip(b) {
                *o += bb;
            }
        }
        let out = Tensor::new(self.value(x).shape().to_vec(), out)?;
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(out, Op::AddRowBias(x, bias), rg))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let out = self.value(x).map(|v| v * c);
        let rg = self.rg(x);
        self.push(out, Op::Scale(x, c), rg)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(gelu);
        let rg = self.rg(x);
        self.push(out, Op::Gelu(x), rg)
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (m, n) = self.value(x).dims2()?;
        if self.value(gain).len() != n || self.value(bias).len() != n {
            return Err(Error::Shape(format!(
                "layer norm over {n} features got gain {:?} and bias {:?}",
                self.value(gain).shape(),
                self.value(bias).shape()
            )));
        }
        let xs = self.value(x).data();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut xhat = vec![0.0; m * n];
        let mut inv_std = vec![0.0; m];
        let mut out = vec![0.0; m * n];
        for r in 0..m {
            let row = &xs[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for c in 0..n {
                let h = (row[c] - mean) * is;
                xhat[r * n + c] = h;
                out[r * n + c] = h * g[c] + b[c];
            }
        }
        let out = Tensor::new(vec![m, n], out)?;
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

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let out = softmax_rows(self.value(x))?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::SoftmaxRows(x), rg))
    }

    /// Multi-head scaled dot-product attention over a flattened batch.
    ///
    /// `q`, `k` and `v` are `(batch*seq) × h` with `h` split evenly across
    /// heads. Padded key positions receive exactly zero weight.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, layout: AttentionLayout) -> Result<Var> {
        let (rows, h) = self.value(q).dims2()?;
        let AttentionLayout {
            batch,
            seq,
            heads,
            ref mask,
        } = layout;
        if rows != batch * seq || mask.len() != rows {
            return Err(Error::Shape(format!(
                "attention input has {rows} rows, layout is {batch}x{seq} with {} mask flags",
                mask.len()
            )));
        }
        for other in [k, v] {
            if self.value(other).shape() != [rows, h] {
                return Err(Error::Shape(format!(
                    "attention q/k/v shapes differ: {:?} vs {:?}",
                    self.value(q).shape(),
                    self.value(other).shape()
                )));
            }
        }
        if heads == 0 || h % heads != 0 {
            return Err(Error::Shape(format!("width {h} not divisible into {heads} heads")));
        }
        let dh = h / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut probs = vec![0.0; batch * heads * seq * seq];
        let mut out = vec![0.0; rows * h];
        let mut scores = vec![0.0; seq];
        for b in 0..batch {
            let base = b * seq;
            for hd in 0..heads {
                let off = hd * dh;
                for i in 0..seq {
                    let qi = &qd[(base + i) * h + off..(base + i) * h + off + dh];
                    let mut max = f64::NEG_INFINITY;
                    for j in 0..seq {
                        if mask[base + j] {
                            let kj = &kd[(base + j) * h + off..(base + j) * h + off + dh];
                            let s = qi.iter().zip(kj).map(|(x, y)| x * y).sum::<f64>() * scale;
                            scores[j] = s;
                            max = max.max(s);
                        }
                    }
                    let p = &mut probs[((b * heads + hd) * seq + i) * seq..][..seq];
                    let mut total = 0.0;
                    for j in 0..seq {
                        if mask[base + j] {
                            p[j] = (scores[j] - max).exp();
                            total += p[j];
                        }
                    }
                    if total > 0.0 {
                        for pj in p.iter_mut() {
                            *pj /= total;
                        }
                    }
                    let o = &mut out[(base + i) * h + off..(base + i) * h + off + dh];
                    for j in 0..seq {
                        if p[j] != 0.0 {
                            let vj = &vd[(base + j) * h + off..(base + j) * h + off + dh];
                            for (oc, vc) in o.iter_mut().zip(vj) {
                                *oc += p[j] * vc;
                            }
                        }
                    }
                }
            }
        }
        let out = Tensor::new(vec![rows, h], out)?;
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        Ok(self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                layout,
                probs,
            },
            rg,
        ))
    }

    /// Selects rows of a matrix; used for embedding lookup and pooling.
    pub fn gather_rows(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let (rows, n) = self.value(table).dims2()?;
        if indices.is_empty() {
            return Err(Error::Shape("gather of zero rows".into()));
        }
        let t = self.value(table).data();
        let mut out = Vec::with_capacity(indices.len() * n);
        for &i in indices {
            if i >= rows {
                return Err(Error::Shape(format!("row index {i} out of range for {rows} rows")));
            }
            out.extend_from_slice(&t[i * n..(i + 1) * n]);
        }
        let out = Tensor::new(vec![indices.len(), n], out)?;
        let rg = self.rg(table);
        Ok(self.push(
            out,
            Op::GatherRows {
                table,
                indices: indices.to_vec(),
            },
            rg,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(x);
        self.push(out, Op::Sum(x), rg)
    }

    /// `Σ (pred_i − target_i)²` over all elements.
    pub fn squared_error_sum(&mut self, pred: Var, target: &[f64]) -> Result<Var> {
        let p = self.value(pred);
        if p.len() != target.len() {
            return Err(Error::Shape(format!(
                "prediction of shape {:?} against {} targets",
                p.shape(),
                target.len()
            )));
        }
        let s = p.data().iter().zip(target).map(|(a, b)| (a - b) * (a - b)).sum();
        let rg = self.rg(pred);
        Ok(self.push(
            Tensor::scalar(s),
            Op::SquaredErrorSum {
                pred,
                target: target.to_vec(),
            },
            rg,
        ))
    }

    /// `Σ −ln softmax(logits[r])[target_r]` over rows with a target,
    /// computed through a shifted log-sum-exp so saturated rows stay finite.
    pub fn cross_entropy_sum(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        let (m, k) = self.value(logits).dims2()?;
        if targets.len() != m {
            return Err(Error::Shape(format!("{m} logit rows against {} targets", targets.len())));
        }
        if let Some(t) = targets.iter().flatten().find(|&&t| t >= k) {
            return Err(Error::Data(format!("label {t} outside {k} classes")));
        }
        let x = self.value(logits).data();
        let mut probs = vec![0.0; m * k];
        let mut s = 0.0;
        for (r, t) in targets.iter().enumerate() {
            let row = &x[r * k..(r + 1) * k];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
            for (p, v) in probs[r * k..(r + 1) * k].iter_mut().zip(row) {
                *p = (v - max).exp() / z;
            }
            if let Some(t) = *t {
                s += max + z.ln() - row[t];
            }
        }
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(s),
            Op::CrossEntropySum {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// `w·x + (1−w)·y` with `(w, 1−w) = softmax(a, b)` for scalar `a`, `b`.
    pub fn mix(&mut self, x: Var, y: Var, a: Var, b: Var) -> Result<Var> {
        if self.value(x).shape() != self.value(y).shape() {
            return Err(Error::Shape(format!(
                "mix needs equal shapes: {:?} vs {:?}",
                self.value(x).shape(),
                self.value(y).shape()
            )));
        }
        if self.value(a).len() != 1 || self.value(b).len() != 1 {
            return Err(Error::Shape("mix weights must be scalars".into()));
        }
        let (w, u) = softmax_pair(self.value(a).data()[0], self.value(b).data()[0]);
        let data = self
            .value(x)
            .data()
            .iter()
            .zip(self.value(y).data())
            .map(|(p, q)| w * p + u * q)
            .collect();
        let out = Tensor::new(self.value(x).shape().to_vec(), data)?;
        let rg = self.rg(x) || self.rg(y) || self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Mix { x, y, a, b, w }, rg))
    }

    /// Gradients of the scalar `loss` with respect to every parameter leaf
    /// that requires a gradient.
    pub fn backward(&self, loss: Var) -> Result<Grads> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        let mut out = Grads::default();

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            match &node.op {
                Op::Leaf => {}
                Op::Param(id) => {
                    out.push(*id, Tensor::new(node.value.shape().to_vec(), g)?);
                }
                Op::MatMul(a, b) => {
                    let (m, k) = self.value(*a).dims2()?;
                    let (_, n) = self.value(*b).dims2()?;
                    if self.rg(*a) {
                        let da = slot(&mut grads, *a, m * k);
                        gemm(
                            m,
                            n,
                            k,
                            MatRef::row_major(&g, n),
                            MatRef::transposed(self.value(*b).data(), n),
                            da,
                            true,
                        );
                    }
                    if self.rg(*b) {
                        let db = slot(&mut grads, *b, k * n);
                        gemm(
                            k,
                            m,
                            n,
                            MatRef::transposed(self.value(*a).data(), k),
                            MatRef::row_major(&g, n),
                            db,
                            true,
                        );
                    }
                }
                Op::Add(a, b) => {
                    for v in [*a, *b] {
                        if self.rg(v) {
                            axpy(slot(&mut grads, v, g.len()), &g, 1.0);
                        }
                    }
                }
                Op::AddRowBias(x, bias) => {
                    if self.rg(*x) {
                        axpy(slot(&mut grads, *x, g.len()), &g, 1.0);
                    }
                    if self.rg(*bias) {
                        let n = self.value(*bias).len();
                        let db = slot(&mut grads, *bias, n);
                        for row in g.chunks(n) {
                            axpy(db, row, 1.0);
                        }
                    }
                }
                Op::Scale(x, c) => {
                    if self.rg(*x) {
                        axpy(slot(&mut grads, *x, g.len()), &g, *c);
                    }
                }
                Op::Gelu(x) => {
                    if self.rg(*x) {
                        let xs = self.value(*x).data();
                        let dx = slot(&mut grads, *x, g.len());
                        for ((d, gi), xi) in dx.iter_mut().zip(&g).zip(xs) {
                            *d += gi * gelu_grad(*xi);
                        }
                    }
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    inv_std,
                } => {
                    let (m, n) = self.value(*x).dims2()?;
                    let gv = self.value(*gain).data();
                    if self.rg(*gain) {
                        let dg = slot(&mut grads, *gain, n);
                        for (gr, hr) in g.chunks(n).zip(xhat.chunks(n)) {
                            for c in 0..n {
                                dg[c] += gr[c] * hr[c];
                            }
                        }
                    }
                    if self.rg(*bias) {
                        let db = slot(&mut grads, *bias, n);
                        for gr in g.chunks(n) {
                            axpy(db, gr, 1.0);
                        }
                    }
                    if self.rg(*x) {
                        let dx = slot(&mut grads, *x, m * n);
                        let nf = n as f64;
                        let mut dh = vec![0.0; n];
                        for r in 0..m {
                            let gr = &g[r * n..(r + 1) * n];
                            let hr = &xhat[r * n..(r + 1) * n];
                            let mut s1 = 0.0;
                            let mut s2 = 0.0;
                            for c in 0..n {
                                dh[c] = gr[c] * gv[c];
                                s1 += dh[c];
                                s2 += dh[c] * hr[c];
                            }
                            let is = inv_std[r];
                            for c in 0..n {
                                dx[r * n + c] += is / nf * (nf * dh[c] - s1 - hr[c] * s2);
                            }
                        }
                    }
                }
                Op::SoftmaxRows(x) => {
                    if self.rg(*x) {
                        let (_, n) = node.value.dims2()?;
                        let y = node.value.data();
                        let dx = slot(&mut grads, *x, g.len());
                        for ((dr, gr), yr) in dx.chunks_mut(n).zip(g.chunks(n)).zip(y.chunks(n)) {
                            let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                            for c in 0..n {
                                dr[c] += yr[c] * (gr[c] - dot);
                            }
                        }
                    }
                }
                Op::Attention {
                    q,
                    k,
                    v,
                    layout,
                    probs,
                } => {
                    self.attention_backward(&mut grads, &g, *q, *k, *v, layout, probs)?;
                }
                Op::GatherRows { table, indices } => {
                    if self.rg(*table) {
                        let (rows, n) = self.value(*table).dims2()?;
                        let dt = slot(&mut grads, *table, rows * n);
                        for (r, &i) in indices.iter().enumerate() {
                            axpy(&mut dt[i * n..(i + 1) * n], &g[r * n..(r + 1) * n], 1.0);
                        }
                    }
                }
                Op::Sum(x) => {
                    if self.rg(*x) {
                        let n = self.value(*x).len();
                        for d in slot(&mut grads, *x, n).iter_mut() {
                            *d += g[0];
                        }
                    }
                }
                Op::SquaredErrorSum { pred, target } => {
                    if self.rg(*pred) {
                        let p = self.value(*pred).data();
                        let dp = slot(&mut grads, *pred, p.len());
                        for ((d, pi), ti) in dp.iter_mut().zip(p).zip(target) {
                            *d += g[0] * 2.0 * (pi - ti);
                        }
                    }
                }
                Op::CrossEntropySum { logits, targets, probs } => {
                    if self.rg(*logits) {
                        let k = self.value(*logits).dims2()?.1;
                        let dx = slot(&mut grads, *logits, probs.len());
                        for (r, t) in targets.iter().enumerate() {
                            if let Some(t) = *t {
                                for c in 0..k {
                                    dx[r * k + c] += g[0] * probs[r * k + c];
                                }
                                dx[r * k + t] -= g[0];
                            }
                        }
                    }
                }
                Op::Mix { x, y, a, b, w } => {
                    let u = 1.0 - w;
                    if self.rg(*x) {
                        axpy(slot(&mut grads, *x, g.len()), &g, *w);
                    }
                    if self.rg(*y) {
                        axpy(slot(&mut grads, *y, g.len()), &g, u);
                    }
                    if self.rg(*a) || self.rg(*b) {
                        let xs = self.value(*x).data();
                        let ys = self.value(*y).data();
                        let s: f64 = g.iter().zip(xs.iter().zip(ys)).map(|(gi, (p, q))| gi * (p - q)).sum();
                        let da = w * u * s;
                        if self.rg(*a) {
                            slot(&mut grads, *a, 1)[0] += da;
                        }
                        if self.rg(*b) {
                            slot(&mut grads, *b, 1)[0] -= da;
                        }
                    }
                }
            }
        }
        Ok(out)
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        grads: &mut [Option<Vec<f64>>],
        g: &[f64],
        q: Var,
        k: Var,
        v: Var,
        layout: &AttentionLayout,
        probs: &[f64],
    ) -> Result<()> {
        let (rows, h) = self.value(q).dims2()?;
        let (batch, seq, heads) = (layout.batch, layout.seq, layout.heads);
        let dh = h / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut dq = vec![0.0; rows * h];
        let mut dk = vec![0.0; rows * h];
        let mut dv = vec![0.0; rows * h];
        let mut dp = vec![0.0; seq];
        for b in 0..batch {
            let base = b * seq;
            for hd in 0..heads {
                let off = hd * dh;
                for i in 0..seq {
                    let p = &probs[((b * heads + hd) * seq + i) * seq..][..seq];
                    let go = &g[(base + i) * h + off..(base + i) * h + off + dh];
                    let mut dot = 0.0;
                    for j in 0..seq {
                        if p[j] == 0.0 {
                            dp[j] = 0.0;
                            continue;
                        }
                        let vj = &vd[(base + j) * h + off..(base + j) * h + off + dh];
                        dp[j] = go.iter().zip(vj).map(|(x, y)| x * y).sum();
                        dot += p[j] * dp[j];
                        let dvj = &mut dv[(base + j) * h + off..(base + j) * h + off + dh];
                        for (d, gc) in dvj.iter_mut().zip(go) {
                            *d += p[j] * gc;
                        }
                    }
                    for j in 0..seq {
                        if p[j] == 0.0 {
                            continue;
                        }
                        let ds = p[j] * (dp[j] - dot) * scale;
                        let (ri, rj) = ((base + i) * h + off, (base + j) * h + off);
                        for c in 0..dh {
                            dq[ri + c] += ds * kd[rj + c];
                            dk[rj + c] += ds * qd[ri + c];
                        }
                    }
                }
            }
        }
        for (var, d) in [(q, dq), (k, dk), (v, dv)] {
            if self.rg(var) {
                axpy(slot(grads, var, rows * h), &d, 1.0);
            }
        }
        Ok(())
    }
}

pub(crate) fn softmax_pair(a: f64, b: f64) -> (f64, f64) {
    let m = a.max(b);
    let (ea, eb) = ((a - m).exp(), (b - m).exp());
    (ea / (ea + eb), eb / (ea + eb))
}

fn slot(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut [f64] {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

fn axpy(dst: &mut [f64], src: &[f64], alpha: f64) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += alpha * s;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::param::ParamGroup;
    use crate::seeding::{normal_tensor, rng};

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-4)
    }

    /// Central finite differences of `f` against the autodiff gradient for
    /// every element of every parameter in `store`.
    fn check(store: &mut ParamStore, f: impl Fn(&mut Tape, &ParamStore) -> Var) {
        let mut tape = Tape::new();
        let loss = f(&mut tape, store);
        let grads = tape.backward(loss).unwrap();
        let eps = 1e-5;
        for id in store.ids().collect::<Vec<_>>() {
            let n = store.value(id).len();
            for i in 0..n {
                let orig = store.value(id).data()[i];
                let eval = |x: f64, store: &mut ParamStore| {
                    store.get_mut(id).value.data_mut()[i] = x;
                    let mut t = Tape::new();
                    let l = f(&mut t, store);
                    t.value(l).data()[0]
                };
                let hi = eval(orig + eps, store);
                let lo = eval(orig - eps, store);
                store.get_mut(id).value.data_mut()[i] = orig;
                let fd = (hi - lo) / (2.0 * eps);
                let ad = grads.get(id).map(|g| g.data()[i]).unwrap_or(0.0);
                assert!(
                    rel_err(ad, fd) < 1e-4,
                    "{}[{i}]: autodiff {ad} vs finite difference {fd}",
                    store.get(id).name
                );
            }
        }
    }

    fn random_store(shapes: &[(&str, &[usize])], seed: u64) -> ParamStore {
        let mut r = rng(seed, 1);
        let mut s = ParamStore::new();
        for (name, shape) in shapes {
            s.insert(*name, ParamGroup::Spal, normal_tensor(shape, 1.0, &mut r)).unwrap();
        }
        s
    }

    fn p(tape: &mut Tape, s: &ParamStore, name: &str) -> Var {
        tape.param(s, s.id_of(name).unwrap())
    }

    #[test]
    fn matmul_examples() {
        let eye = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let m = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        assert_eq!(eye.matmul(&m).unwrap(), m);
        let sel = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 0.0]]).unwrap();
        let col = Tensor::from_rows(&[vec![5.0], vec![7.0]]).unwrap();
        assert_eq!(sel.matmul(&col).unwrap().data(), &[5.0, 0.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut r = rng(11, 0);
        let a = normal_tensor(&[3, 4], 1.0, &mut r);
        let b = normal_tensor(&[4, 2], 1.0, &mut r);
        let mut tape = Tape::new();
        let (va, vb) = (tape.constant(a.clone()), tape.constant(b.clone()));
        let c = tape.matmul(va, vb).unwrap();
        for i in 0..3 {
            for j in 0..2 {
                let mut s = 0.0;
                for k in 0..4 {
                    s += a.get2(i, k) * b.get2(k, j);
                }
                assert!((tape.value(c).get2(i, j) - s).abs() < 1e-12);
            }
        }
        let bad = tape.constant(Tensor::zeros(&[3, 2]));
        let msg = tape.matmul(va, bad).unwrap_err().to_string();
        assert!(msg.contains("[3, 4]") && msg.contains("[3, 2]"), "{msg}");
    }

    #[test]
    fn softmax_examples() {
        let x = Tensor::from_rows(&[vec![0.0, 0.0], vec![1000.0, 0.0]]).unwrap();
        let y = softmax_rows(&x).unwrap();
        assert_eq!(y.row(0), &[0.5, 0.5]);
        assert_eq!(y.row(1)[0], 1.0);
        assert!(y.row(1)[1] >= 0.0 && y.row(1)[1] < 1e-300);
        let z = softmax_rows(&Tensor::from_rows(&[vec![1.0, 2.0, 3.0]]).unwrap()).unwrap();
        let total: f64 = [1.0f64, 2.0, 3.0].iter().map(|v| v.exp()).sum();
        for (i, v) in [1.0f64, 2.0, 3.0].iter().enumerate() {
            assert!((z.data()[i] - v.exp() / total).abs() < 1e-12);
        }
        assert!((z.sum() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn sum_and_zero_losses() {
        let mut s = random_store(&[("p", &[2, 3])], 0);
        let id = s.id_of("p").unwrap();
        let mut tape = Tape::new();
        let v = tape.param(&s, id);
        let l = tape.sum(v);
        let g = tape.backward(l).unwrap();
        assert!(g.get(id).unwrap().data().iter().all(|&x| x == 1.0));

        let mut tape = Tape::new();
        let v = tape.param(&s, id);
        let z = tape.scale(v, 0.0);
        let l = tape.sum(z);
        let g = tape.backward(l).unwrap();
        assert!(g.get(id).unwrap().data().iter().all(|&x| x == 0.0));
        s.apply_grads(&g);
        assert!(s.get(id).has_grad);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let s = random_store(&[("p", &[2, 3])], 0);
        let mut tape = Tape::new();
        let v = p(&mut tape, &s, "p");
        assert!(matches!(tape.backward(v), Err(Error::Contract(_))));
    }

    #[test]
    fn frozen_params_get_no_gradient_unless_requested() {
        let mut s = random_store(&[("p", &[2, 2])], 0);
        let id = s.id_of("p").unwrap();
        s.get_mut(id).trainable = false;
        let mut tape = Tape::new();
        let v = tape.param(&s, id);
        let l = tape.sum(v);
        assert!(tape.backward(l).unwrap().get(id).is_none());
        let mut tape = Tape::with_all_grads();
        let v = tape.param(&s, id);
        let l = tape.sum(v);
        assert!(tape.backward(l).unwrap().get(id).is_some());
    }

    #[test]
    fn gradcheck_two_layer_network() {
        let mut s = random_store(
            &[("x", &[4, 3]), ("w1", &[3, 5]), ("b1", &[5]), ("w2", &[5, 2]), ("b2", &[2])],
            5,
        );
        check(&mut s, |t, s| {
            let x = p(t, s, "x");
            let w1 = p(t, s, "w1");
            let b1 = p(t, s, "b1");
            let h = t.matmul(x, w1).unwrap();
            let h = t.add_row_bias(h, b1).unwrap();
            let h = t.gelu(h);
            let w2 = p(t, s, "w2");
            let b2 = p(t, s, "b2");
            let o = t.matmul(h, w2).unwrap();
            let o = t.add_row_bias(o, b2).unwrap();
            t.cross_entropy_sum(o, &[Some(0), Some(1), None, Some(1)]).unwrap()
        });
    }

    #[test]
    fn gradcheck_layer_norm_and_squared_error() {
        let mut s = random_store(&[("x", &[3, 4]), ("g", &[4]), ("b", &[4])], 6);
        check(&mut s, |t, s| {
            let x = p(t, s, "x");
            let g = p(t, s, "g");
            let b = p(t, s, "b");
            let y = t.layer_norm(x, g, b, 1e-12).unwrap();
            t.squared_error_sum(y, &[0.3; 12]).unwrap()
        });
    }

    #[test]
    fn gradcheck_masked_attention() {
        let mut s = random_store(&[("q", &[6, 4]), ("k", &[6, 4]), ("v", &[6, 4])], 7);
        let layout = AttentionLayout {
            batch: 2,
            seq: 3,
            heads: 2,
            mask: Arc::new(vec![true, true, false, true, true, true]),
        };
        check(&mut s, |t, s| {
            let q = p(t, s, "q");
            let k = p(t, s, "k");
            let v = p(t, s, "v");
            let a = t.attention(q, k, v, layout.clone()).unwrap();
            t.squared_error_sum(a, &[0.1; 24]).unwrap()
        });
    }

    #[test]
    fn padded_keys_do_not_leak() {
        let s = random_store(&[("q", &[3, 2]), ("k", &[3, 2]), ("v", &[3, 2])], 8);
        let layout = AttentionLayout {
            batch: 1,
            seq: 3,
            heads: 1,
            mask: Arc::new(vec![true, true, false]),
        };
        let run = |s: &ParamStore| {
            let mut t = Tape::new();
            let (q, k, v) = (p(&mut t, s, "q"), p(&mut t, s, "k"), p(&mut t, s, "v"));
            let a = t.attention(q, k, v, layout.clone()).unwrap();
            t.value(a).data()[..4].to_vec()
        };
        let before = run(&s);
        let mut s2 = s.clone();
        let vid = s2.id_of("v").unwrap();
        s2.get_mut(vid).value.data_mut()[4] = 1e6;
        let kid = s2.id_of("k").unwrap();
        s2.get_mut(kid).value.data_mut()[5] = -3e3;
        assert_eq!(before, run(&s2));
    }

    #[test]
    fn gradcheck_gather_and_mix() {
        let mut s = random_store(&[("t", &[5, 3]), ("y", &[4, 3]), ("a", &[1]), ("b", &[1])], 9);
        check(&mut s, |t, s| {
            let table = p(t, s, "t");
            let x = t.gather_rows(table, &[4, 0, 4, 2]).unwrap();
            let y = p(t, s, "y");
            let a = p(t, s, "a");
            let b = p(t, s, "b");
            let m = t.mix(x, y, a, b).unwrap();
            let m = t.scale(m, 0.7);
            t.squared_error_sum(m, &[0.2; 12]).unwrap()
        });
    }

    #[test]
    fn saturated_cross_entropy_stays_finite() {
        let mut t = Tape::with_all_grads();
        let x = t.constant(Tensor::from_rows(&[vec![900.0, -900.0], vec![0.0, 0.0]]).unwrap());
        let loss = t.cross_entropy_sum(x, &[Some(1), Some(0)]).unwrap();
        assert_eq!(t.value(loss).data()[0], 1800.0 + 2f64.ln());
    }

    #[test]
    fn mix_weights() {
        assert_eq!(softmax_pair(0.3, 0.3), (0.5, 0.5));
        let (w, u) = softmax_pair(1.0, 0.0);
        assert!((w - 1f64.exp() / (1f64.exp() + 1.0)).abs() < 1e-15);
        assert!((w - 0.7311).abs() < 1e-4);
        assert!((w + u - 1.0).abs() < 1e-15);
    }

    #[test]
    fn forward_is_deterministic() {
        let s = random_store(&[("x", &[4, 3]), ("w", &[3, 3])], 10);
        let run = || {
            let mut t = Tape::new();
            let x = p(&mut t, &s, "x");
            let w = p(&mut t, &s, "w");
            let y = t.matmul(x, w).unwrap();
            let y = t.softmax_rows(y).unwrap();
            t.value(y).clone()
        };
        assert!(run().bit_eq(&run()));
    }
}
