//! Reverse-mode differentiation over a per-sample operation tape.
//!
//! A [`Tape`] borrows a [`ParamStore`] immutably and records every operation
//! as a node. Nodes are appended after their inputs, so the node order is a
//! topological order and [`Tape::backward`] visits each node exactly once by
//! walking it in reverse.

use std::collections::BTreeMap;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use super::tensor::{
    dot, matmul_at_into, matmul_bt_into, matmul_into, sigmoid, softmax_row, Tensor,
};
use crate::error::{usage_err, Error, Result};

/// Added to the row variance before the square root in `layer_norm`.
pub const LAYER_NORM_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// Named trainable tensors, in registration order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: BTreeMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(usage_err(format!("duplicate parameter `{name}`")));
        }
        let id = ParamId(self.tensors.len());
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(value);
        Ok(id)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

}

/// Gradients for every parameter of a store, zero where a parameter did not participate.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    tensors: Vec<Tensor>,
}

impl Gradients {
    pub fn zeros_like(params: &ParamStore) -> Self {
        Self {
            tensors: params.tensors.iter().map(|t| Tensor::zeros(t.shape())).collect(),
        }
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Tensor> {
        self.tensors.iter()
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            a.add_assign(b);
        }
    }

    pub fn scale(&mut self, k: f64) {
        self.tensors.iter_mut().for_each(|t| t.scale_in_place(k));
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }
}

/// Handle to a node on a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Value {
    Owned(Tensor),
    Param(ParamId),
}

enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    AddConst(Var),
    Scale(Var, f64),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    Transpose(Var),
    Reshape(Var),
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    Softmax(Var),
    LayerNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Relu(Var),
    Sigmoid(Var),
    Dropout(Var, Vec<f64>),
    Attention(Box<AttentionCache>),
    Sum(Var),
    RowSum(Var),
    Bce {
        logit: Var,
        target: f64,
    },
    Ce {
        logits: Var,
        class: usize,
    },
    StraightThrough(Var),
}

struct AttentionCache {
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
    groups: Vec<Range<usize>>,
    /// Softmax probabilities, laid out group by group, head by head, `len × len`.
    probs: Vec<f64>,
    /// Inverted-dropout multipliers on `probs` (same layout), if training.
    drop: Option<Vec<f64>>,
}

struct Node {
    value: Value,
    op: Op,
    requires_grad: bool,
}

pub struct Tape<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::Shape {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self {
            params,
            nodes: Vec::with_capacity(256),
        }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
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
            Value::Param(id) => self.params.get(*id),
        }
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Value::Owned(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Constant input (no gradient).
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        self.nodes.push(Node {
            value: Value::Param(id),
            op: Op::Param(id),
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param_by_name(&mut self, name: &str) -> Result<Var> {
        let id = self
            .params
            .id(name)
            .ok_or_else(|| usage_err(format!("unknown parameter `{name}`")))?;
        Ok(self.param(id))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = (ta.rows(), ta.cols());
        let (k2, n) = (tb.rows(), tb.cols());
        if k != k2 || ta.shape().len() > 2 || tb.shape().len() != 2 {
            return Err(shape_err("matmul", ta, tb));
        }
        let mut out = vec![0.0; m * n];
        matmul_into(ta.data(), tb.data(), &mut out, m, k, n);
        let t = Tensor::matrix(m, n, out)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::MatMul(a, b), rg))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err(op, ta, tb));
        }
        Ok(())
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| f(*x, *y)).collect();
        Tensor::new(ta.shape().to_vec(), data).expect("same shape")
    }

    fn map(&self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let ta = self.value(a);
        Tensor::new(ta.shape().to_vec(), ta.data().iter().map(|x| f(*x)).collect())
            .expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let t = self.zip_with(a, b, |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let t = self.zip_with(a, b, |x, y| x - y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Sub(a, b), rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let t = self.zip_with(a, b, |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    /// `a[m,n] + b[n]` broadcast over rows.
    pub fn add_bias(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if tb.len() != ta.cols() {
            return Err(shape_err("add_bias", ta, tb));
        }
        let n = ta.cols();
        let mut data = ta.data().to_vec();
        for row in data.chunks_mut(n) {
            for (x, y) in row.iter_mut().zip(tb.data()) {
                *x += y;
            }
        }
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::AddBias(a, b), rg))
    }

    /// Adds a constant tensor; the gradient passes through to `a` unchanged.
    pub fn add_const(&mut self, a: Var, c: &Tensor) -> Result<Var> {
        let ta = self.value(a);
        if ta.shape() != c.shape() {
            return Err(shape_err("add_const", ta, c));
        }
        let data = ta.data().iter().zip(c.data()).map(|(x, y)| x + y).collect();
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(a);
        Ok(self.push(t, Op::AddConst(a), rg))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let t = self.map(a, |x| x * k);
        let rg = self.rg(a);
        self.push(t, Op::Scale(a, k), rg)
    }

    /// Concatenation along the last axis; all parts must share the row count.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| usage_err("concat of zero tensors"))?;
        let rows = self.value(*first).rows();
        for p in parts {
            if self.value(*p).rows() != rows {
                return Err(shape_err("concat_cols", self.value(*first), self.value(*p)));
            }
        }
        let total: usize = parts.iter().map(|p| self.value(*p).cols()).sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for p in parts {
                data.extend_from_slice(self.value(*p).row(r));
            }
        }
        let t = Tensor::matrix(rows, total, data)?;
        let rg = parts.iter().any(|p| self.rg(*p));
        Ok(self.push(t, Op::ConcatCols(parts.to_vec()), rg))
    }

    /// Concatenation along the first axis; all parts must share the column count.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| usage_err("concat of zero tensors"))?;
        let cols = self.value(*first).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            let t = self.value(*p);
            if t.cols() != cols {
                return Err(shape_err("concat_rows", self.value(*first), t));
            }
            rows += t.rows();
            data.extend_from_slice(t.data());
        }
        let t = Tensor::matrix(rows, cols, data)?;
        let rg = parts.iter().any(|p| self.rg(*p));
        Ok(self.push(t, Op::ConcatRows(parts.to_vec()), rg))
    }

    pub fn slice_rows(&mut self, a: Var, range: Range<usize>) -> Result<Var> {
        let ta = self.value(a);
        if range.start > range.end || range.end > ta.rows() {
            return Err(Error::Shape {
                op: "slice_rows",
                lhs: ta.shape().to_vec(),
                rhs: vec![range.start, range.end],
            });
        }
        let c = ta.cols();
        let data = ta.data()[range.start * c..range.end * c].to_vec();
        let t = Tensor::matrix(range.len(), c, data)?;
        let rg = self.rg(a);
        Ok(self.push(t, Op::SliceRows(a, range.start), rg))
    }

    pub fn slice_cols(&mut self, a: Var, range: Range<usize>) -> Result<Var> {
        let ta = self.value(a);
        if range.start > range.end || range.end > ta.cols() {
            return Err(Error::Shape {
                op: "slice_cols",
                lhs: ta.shape().to_vec(),
                rhs: vec![range.start, range.end],
            });
        }
        let rows = ta.rows();
        let mut data = Vec::with_capacity(rows * range.len());
        for r in 0..rows {
            data.extend_from_slice(&ta.row(r)[range.clone()]);
        }
        let t = Tensor::matrix(rows, range.len(), data)?;
        let rg = self.rg(a);
        Ok(self.push(t, Op::SliceCols(a, range.start), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let (m, n) = (ta.rows(), ta.cols());
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = ta.data()[i * n + j];
            }
        }
        let t = Tensor::matrix(n, m, data).expect("transpose shape");
        let rg = self.rg(a);
        self.push(t, Op::Transpose(a), rg)
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let t = self.value(a).clone().reshape(shape)?;
        let rg = self.rg(a);
        Ok(self.push(t, Op::Reshape(a), rg))
    }

    /// Row lookup `table[ids[i], :]` for each id.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tt = self.value(table);
        let (rows, dim) = (tt.rows(), tt.cols());
        let mut data = Vec::with_capacity(ids.len() * dim);
        for &id in ids {
            if id >= rows {
                return Err(crate::error::data_err(format!(
                    "embedding id {id} out of range for table with {rows} rows"
                )));
            }
            data.extend_from_slice(tt.row(id));
        }
        let t = Tensor::matrix(ids.len(), dim, data)?;
        let rg = self.rg(table);
        Ok(self.push(
            t,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// Softmax over the last axis. Entries whose column is masked out (`false`) are exactly 0.
    pub fn softmax(&mut self, a: Var, mask: Option<Vec<bool>>) -> Result<Var> {
        let ta = self.value(a);
        let c = ta.cols();
        if let Some(m) = &mask {
            if m.len() != c {
                return Err(Error::Shape {
                    op: "softmax mask",
                    lhs: ta.shape().to_vec(),
                    rhs: vec![m.len()],
                });
            }
        }
        let mut out = vec![0.0; ta.len()];
        for r in 0..ta.rows() {
            softmax_row(ta.row(r), mask.as_deref(), &mut out[r * c..(r + 1) * c]);
        }
        let t = Tensor::new(ta.shape().to_vec(), out)?;
        let rg = self.rg(a);
        Ok(self.push(t, Op::Softmax(a), rg))
    }

    /// Per-row normalization over the last axis followed by `gamma ∘ x̂ + beta`.
    pub fn layer_norm(&mut self, a: Var, gamma: Var, beta: Var) -> Result<Var> {
        let ta = self.value(a);
        let n = ta.cols();
        if self.value(gamma).len() != n {
            return Err(shape_err("layer_norm gamma", ta, self.value(gamma)));
        }
        if self.value(beta).len() != n {
            return Err(shape_err("layer_norm beta", ta, self.value(beta)));
        }
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![0.0; ta.len()];
        let mut inv_std = vec![0.0; ta.rows()];
        let mut out = vec![0.0; ta.len()];
        for r in 0..ta.rows() {
            let row = ta.row(r);
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[r] = is;
            for j in 0..n {
                let xh = (row[j] - mean) * is;
                xhat[r * n + j] = xh;
                out[r * n + j] = g[j] * xh + b[j];
            }
        }
        let t = Tensor::new(ta.shape().to_vec(), out)?;
        let rg = self.rg(a) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            t,
            Op::LayerNorm {
                input: a,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let t = self.map(a, |x| x.max(0.0));
        let rg = self.rg(a);
        self.push(t, Op::Relu(a), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let t = self.map(a, sigmoid);
        let rg = self.rg(a);
        self.push(t, Op::Sigmoid(a), rg)
    }

    /// Inverted dropout. `keep` holds one uniform draw per element; an element is
    /// kept when its draw is `>= p` and then scaled by `1/(1-p)`. With `train == false`
    /// (or `p == 0`) this is the identity and no node is recorded.
    pub fn dropout(&mut self, a: Var, p: f64, train: bool, rng: &mut impl rand::Rng) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(usage_err(format!("dropout probability {p} outside [0, 1)")));
        }
        if !train || p == 0.0 {
            return Ok(a);
        }
        let scale = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..self.value(a).len())
            .map(|_| if rng.random::<f64>() >= p { scale } else { 0.0 })
            .collect();
        let ta = self.value(a);
        let data = ta.data().iter().zip(&mask).map(|(x, m)| x * m).collect();
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(a);
        Ok(self.push(t, Op::Dropout(a, mask), rg))
    }

    /// Scaled dot-product multi-head self-attention.
    ///
    /// `q`, `k`, `v` are `[rows, hidden]`. Rows are partitioned into `groups`; a row
    /// attends only to rows of its own group whose `key_mask` entry is `true`.
    /// `attn_dropout` applies inverted dropout to the attention probabilities.
    #[allow(clippy::too_many_arguments)]
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        groups: Vec<Range<usize>>,
        key_mask: Option<Vec<bool>>,
        attn_dropout: Option<(f64, &mut (dyn rand::RngCore + '_))>,
    ) -> Result<Var> {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        if tq.shape() != tk.shape() {
            return Err(shape_err("attention q/k", tq, tk));
        }
        if tq.shape() != tv.shape() {
            return Err(shape_err("attention q/v", tq, tv));
        }
        let (rows, hidden) = (tq.rows(), tq.cols());
        if heads == 0 || hidden % heads != 0 {
            return Err(Error::Config(format!(
                "hidden size {hidden} not divisible by {heads} heads"
            )));
        }
        if let Some(m) = &key_mask {
            if m.len() != rows {
                return Err(Error::Shape {
                    op: "attention mask",
                    lhs: tq.shape().to_vec(),
                    rhs: vec![m.len()],
                });
            }
        }
        for g in &groups {
            if g.end > rows || g.start > g.end {
                return Err(usage_err(format!("attention group {g:?} outside {rows} rows")));
            }
        }
        let d = hidden / heads;
        let inv_sqrt = 1.0 / (d as f64).sqrt();
        let total: usize = groups.iter().map(|g| g.len() * g.len() * heads).sum();
        let mut probs = vec![0.0; total];
        let mut out = vec![0.0; rows * hidden];
        let (qd, kd, vd) = (tq.data(), tk.data(), tv.data());
        let mut scores = Vec::new();
        let mut off = 0;
        for g in &groups {
            let len = g.len();
            let gmask: Option<Vec<bool>> = key_mask.as_ref().map(|m| m[g.clone()].to_vec());
            scores.resize(len, 0.0);
            for h in 0..heads {
                let cols = h * d..(h + 1) * d;
                for i in 0..len {
                    let qi = &qd[(g.start + i) * hidden..][cols.clone()];
                    for j in 0..len {
                        let kj = &kd[(g.start + j) * hidden..][cols.clone()];
                        scores[j] = dot(qi, kj) * inv_sqrt;
                    }
                    let prow = &mut probs[off + i * len..off + (i + 1) * len];
                    softmax_row(&scores, gmask.as_deref(), prow);
                }
                off += len * len;
            }
        }
        let drop = match attn_dropout {
            Some((p, rng)) if p > 0.0 => {
                let scale = 1.0 / (1.0 - p);
                Some(
                    (0..total)
                        .map(|_| {
                            let u: f64 = rand::Rng::random(rng);
                            if u >= p {
                                scale
                            } else {
                                0.0
                            }
                        })
                        .collect::<Vec<f64>>(),
                )
            }
            _ => None,
        };
        let mut off = 0;
        for g in &groups {
            let len = g.len();
            for h in 0..heads {
                for i in 0..len {
                    let orow = &mut out[(g.start + i) * hidden + h * d..][..d];
                    for j in 0..len {
                        let idx = off + i * len + j;
                        let mut p = probs[idx];
                        if let Some(dm) = &drop {
                            p *= dm[idx];
                        }
                        if p == 0.0 {
                            continue;
                        }
                        let vj = &vd[(g.start + j) * hidden + h * d..][..d];
                        for (o, x) in orow.iter_mut().zip(vj) {
                            *o += p * x;
                        }
                    }
                }
                off += len * len;
            }
        }
        let t = Tensor::matrix(rows, hidden, out)?;
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        Ok(self.push(
            t,
            Op::Attention(Box::new(AttentionCache {
                q,
                k,
                v,
                heads,
                groups,
                probs,
                drop,
            })),
            rg,
        ))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Sum over the last axis: `[m, n] -> [m, 1]`.
    pub fn row_sum(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let data: Vec<f64> = (0..ta.rows()).map(|r| ta.row(r).iter().sum()).collect();
        let t = Tensor::matrix(ta.rows(), 1, data).expect("row sum shape");
        let rg = self.rg(a);
        self.push(t, Op::RowSum(a), rg)
    }

    /// Stable binary cross-entropy of a single logit against a 0/1 target.
    pub fn bce_with_logits(&mut self, logit: Var, target: f64) -> Result<Var> {
        let tl = self.value(logit);
        if tl.len() != 1 {
            return Err(usage_err(format!("bce expects one logit, got shape {:?}", tl.shape())));
        }
        let loss = super::tensor::bce_with_logits(tl.item(), target)?;
        let rg = self.rg(logit);
        Ok(self.push(Tensor::scalar(loss), Op::Bce { logit, target }, rg))
    }

    /// Cross-entropy of `class` against a row of logits.
    pub fn ce_with_logits(&mut self, logits: Var, class: usize) -> Result<Var> {
        let tl = self.value(logits);
        if tl.rows() != 1 {
            return Err(usage_err(format!(
                "ce expects a single row of logits, got shape {:?}",
                tl.shape()
            )));
        }
        let loss = super::tensor::ce_with_logits(tl.data(), class)?;
        let rg = self.rg(logits);
        Ok(self.push(Tensor::scalar(loss), Op::Ce { logits, class }, rg))
    }

    /// Forward value is the per-row one-hot of the argmax of `soft`; the gradient
    /// is passed to `soft` unchanged (straight-through estimator).
    pub fn straight_through(&mut self, soft: Var) -> Var {
        let ts = self.value(soft);
        let c = ts.cols();
        let mut data = vec![0.0; ts.len()];
        for r in 0..ts.rows() {
            data[r * c + argmax(ts.row(r))] = 1.0;
        }
        let t = Tensor::new(ts.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(soft);
        self.push(t, Op::StraightThrough(soft), rg)
    }

    /// Gradients of the scalar `loss` with respect to every parameter of the store.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let tl = self.value(loss);
        if tl.len() != 1 {
            return Err(usage_err(format!(
                "backward needs a scalar loss, got shape {:?}",
                tl.shape()
            )));
        }
        let mut grads = Gradients::zeros_like(self.params);
        let mut g: Vec<Option<Vec<f64>>> = (0..=loss.0).map(|_| None).collect();
        g[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(gout) = g[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            self.backward_node(idx, node, &gout, &mut g, &mut grads);
        }
        Ok(grads)
    }

    fn backward_node(
        &self,
        idx: usize,
        node: &Node,
        gout: &[f64],
        g: &mut [Option<Vec<f64>>],
        grads: &mut Gradients,
    ) {
        if let Op::Attention(cache) = &node.op {
            self.backward_attention(cache, gout, g);
            return;
        }
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let n = self.value(v).len();
            let buf = g[v.0].get_or_insert_with(|| vec![0.0; n]);
            f(buf);
        };
        let out = self.value(Var(idx));
        match &node.op {
            Op::Leaf => {}
            Op::Param(id) => {
                let t = &mut grads.tensors[id.0];
                for (a, b) in t.data_mut().iter_mut().zip(gout) {
                    *a += b;
                }
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                acc(*a, &mut |buf| matmul_bt_into(gout, tb.data(), buf, m, k, n));
                acc(*b, &mut |buf| matmul_at_into(ta.data(), gout, buf, m, k, n));
            }
            Op::Add(a, b) => {
                acc(*a, &mut |buf| add_into(buf, gout));
                acc(*b, &mut |buf| add_into(buf, gout));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |buf| add_into(buf, gout));
                acc(*b, &mut |buf| buf.iter_mut().zip(gout).for_each(|(x, y)| *x -= y));
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                acc(*a, &mut |buf| {
                    for ((x, gy), bv) in buf.iter_mut().zip(gout).zip(tb.data()) {
                        *x += gy * bv;
                    }
                });
                acc(*b, &mut |buf| {
                    for ((x, gy), av) in buf.iter_mut().zip(gout).zip(ta.data()) {
                        *x += gy * av;
                    }
                });
            }
            Op::AddBias(a, b) => {
                acc(*a, &mut |buf| add_into(buf, gout));
                let n = self.value(*b).len();
                acc(*b, &mut |buf| {
                    for row in gout.chunks(n) {
                        add_into(buf, row);
                    }
                });
            }
            Op::AddConst(a) | Op::Reshape(a) | Op::StraightThrough(a) => {
                acc(*a, &mut |buf| add_into(buf, gout));
            }
            Op::Scale(a, k) => {
                acc(*a, &mut |buf| buf.iter_mut().zip(gout).for_each(|(x, y)| *x += k * y));
            }
            Op::ConcatCols(parts) => {
                let rows = out.rows();
                let total = out.cols();
                let mut col = 0;
                for p in parts {
                    let w = self.value(*p).cols();
                    acc(*p, &mut |buf| {
                        for r in 0..rows {
                            add_into(&mut buf[r * w..(r + 1) * w], &gout[r * total + col..][..w]);
                        }
                    });
                    col += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let n = self.value(*p).len();
                    acc(*p, &mut |buf| add_into(buf, &gout[off..off + n]));
                    off += n;
                }
            }
            Op::SliceRows(a, start) => {
                let c = out.cols();
                acc(*a, &mut |buf| add_into(&mut buf[start * c..start * c + gout.len()], gout));
            }
            Op::SliceCols(a, start) => {
                let (rows, w) = (out.rows(), out.cols());
                let c = self.value(*a).cols();
                acc(*a, &mut |buf| {
                    for r in 0..rows {
                        add_into(&mut buf[r * c + start..][..w], &gout[r * w..(r + 1) * w]);
                    }
                });
            }
            Op::Transpose(a) => {
                let (n, m) = (out.rows(), out.cols());
                acc(*a, &mut |buf| {
                    for i in 0..m {
                        for j in 0..n {
                            buf[i * n + j] += gout[j * m + i];
                        }
                    }
                });
            }
            Op::Embedding { table, ids } => {
                let dim = out.cols();
                acc(*table, &mut |buf| {
                    for (r, &id) in ids.iter().enumerate() {
                        add_into(&mut buf[id * dim..(id + 1) * dim], &gout[r * dim..(r + 1) * dim]);
                    }
                });
            }
            Op::Softmax(a) => {
                let c = out.cols();
                let y = out.data();
                acc(*a, &mut |buf| {
                    for r in 0..out.rows() {
                        let yr = &y[r * c..(r + 1) * c];
                        let gr = &gout[r * c..(r + 1) * c];
                        let s = dot(yr, gr);
                        for j in 0..c {
                            buf[r * c + j] += yr[j] * (gr[j] - s);
                        }
                    }
                });
            }
            Op::LayerNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let n = out.cols();
                let rows = out.rows();
                let gam = self.value(*gamma).data();
                acc(*gamma, &mut |buf| {
                    for r in 0..rows {
                        for j in 0..n {
                            buf[j] += gout[r * n + j] * xhat[r * n + j];
                        }
                    }
                });
                acc(*beta, &mut |buf| {
                    for row in gout.chunks(n) {
                        add_into(buf, row);
                    }
                });
                acc(*input, &mut |buf| {
                    let nf = n as f64;
                    for r in 0..rows {
                        let xh = &xhat[r * n..(r + 1) * n];
                        let gr = &gout[r * n..(r + 1) * n];
                        let mut sum_gx = 0.0;
                        let mut sum_gxx = 0.0;
                        for j in 0..n {
                            let gx = gr[j] * gam[j];
                            sum_gx += gx;
                            sum_gxx += gx * xh[j];
                        }
                        for j in 0..n {
                            let gx = gr[j] * gam[j];
                            buf[r * n + j] +=
                                inv_std[r] * (gx - sum_gx / nf - xh[j] * sum_gxx / nf);
                        }
                    }
                });
            }
            Op::Relu(a) => {
                let x = self.value(*a).data();
                acc(*a, &mut |buf| {
                    for ((b, gy), xv) in buf.iter_mut().zip(gout).zip(x) {
                        if *xv > 0.0 {
                            *b += gy;
                        }
                    }
                });
            }
            Op::Sigmoid(a) => {
                let y = out.data();
                acc(*a, &mut |buf| {
                    for ((b, gy), yv) in buf.iter_mut().zip(gout).zip(y) {
                        *b += gy * yv * (1.0 - yv);
                    }
                });
            }
            Op::Dropout(a, mask) => {
                acc(*a, &mut |buf| {
                    for ((b, gy), m) in buf.iter_mut().zip(gout).zip(mask) {
                        *b += gy * m;
                    }
                });
            }
            Op::Attention(_) => unreachable!("handled above"),
            Op::Sum(a) => {
                let s = gout[0];
                acc(*a, &mut |buf| buf.iter_mut().for_each(|x| *x += s));
            }
            Op::RowSum(a) => {
                let c = self.value(*a).cols();
                acc(*a, &mut |buf| {
                    for (r, row) in buf.chunks_mut(c).enumerate() {
                        row.iter_mut().for_each(|x| *x += gout[r]);
                    }
                });
            }
            Op::Bce { logit, target } => {
                let x = self.value(*logit).item();
                let d = (sigmoid(x) - target) * gout[0];
                acc(*logit, &mut |buf| buf[0] += d);
            }
            Op::Ce { logits, class } => {
                let tl = self.value(*logits);
                let mut p = vec![0.0; tl.len()];
                softmax_row(tl.data(), None, &mut p);
                acc(*logits, &mut |buf| {
                    for (j, (b, pj)) in buf.iter_mut().zip(&p).enumerate() {
                        let y = if j == *class { 1.0 } else { 0.0 };
                        *b += (pj - y) * gout[0];
                    }
                });
            }
        }
    }

    fn backward_attention(&self, c: &AttentionCache, gout: &[f64], g: &mut [Option<Vec<f64>>]) {
        let (tq, tk, tv) = (self.value(c.q), self.value(c.k), self.value(c.v));
        let (rows, hidden) = (tq.rows(), tq.cols());
        let d = hidden / c.heads;
        let inv_sqrt = 1.0 / (d as f64).sqrt();
        let mut dq = vec![0.0; rows * hidden];
        let mut dk = vec![0.0; rows * hidden];
        let mut dv = vec![0.0; rows * hidden];
        let (qd, kd, vd) = (tq.data(), tk.data(), tv.data());
        let mut dp = Vec::new();
        let mut off = 0;
        for grp in &c.groups {
            let len = grp.len();
            dp.resize(len, 0.0);
            for h in 0..c.heads {
                for i in 0..len {
                    let gi = &gout[(grp.start + i) * hidden + h * d..][..d];
                    let prow = &c.probs[off + i * len..off + (i + 1) * len];
                    // dP and dV
                    for j in 0..len {
                        let idx = off + i * len + j;
                        let m = c.drop.as_ref().map_or(1.0, |dm| dm[idx]);
                        let vj = &vd[(grp.start + j) * hidden + h * d..][..d];
                        dp[j] = m * dot(gi, vj);
                        let pm = prow[j] * m;
                        if pm != 0.0 {
                            let dvj = &mut dv[(grp.start + j) * hidden + h * d..][..d];
                            for (x, y) in dvj.iter_mut().zip(gi) {
                                *x += pm * y;
                            }
                        }
                    }
                    // softmax backward
                    let s: f64 = prow.iter().zip(&dp).map(|(p, x)| p * x).sum();
                    let qi_off = (grp.start + i) * hidden + h * d;
                    for j in 0..len {
                        let ds = prow[j] * (dp[j] - s) * inv_sqrt;
                        if ds == 0.0 {
                            continue;
                        }
                        let kj_off = (grp.start + j) * hidden + h * d;
                        for t in 0..d {
                            dq[qi_off + t] += ds * kd[kj_off + t];
                            dk[kj_off + t] += ds * qd[qi_off + t];
                        }
                    }
                }
                off += len * len;
            }
        }
        for (var, buf) in [(c.q, dq), (c.k, dk), (c.v, dv)] {
            if !self.nodes[var.0].requires_grad {
                continue;
            }
            match &mut g[var.0] {
                Some(existing) => add_into(existing, &buf),
                slot => *slot = Some(buf),
            }
        }
    }
}

#[inline]
fn add_into(dst: &mut [f64], src: &[f64]) {
    for (a, b) in dst.iter_mut().zip(src) {
        *a += b;
    }
}

/// Index of the largest element; ties go to the lowest index.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate() {
        if v > xs[best] {
            best = i;
        }
    }
    best
}
