//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation applied to its [`Var`] handles. Values
//! are computed eagerly; [`Graph::backward`] walks the tape in reverse and
//! returns a [`Gradients`] table holding `d loss / d node` for every node that
//! depends on a trainable leaf.
//!
//! Matrices are row-major `[rows, cols]`; ops documented as "rows" treat any
//! tensor as a matrix over its last axis.

use std::collections::HashMap;

use super::gemm::{gemm, View};
use super::params::{ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};

const LN_EPS: f64 = 1e-5;

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param,
    MatMul {
        a: Var,
        b: Var,
        plan: BatchPlan,
    },
    Add(Var, Var),
    AddBias(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Maximum(Var, Var),
    Minimum(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Gelu(Var),
    Sigmoid(Var),
    Abs(Var),
    Softmax {
        x: Var,
        axis: usize,
    },
    Sum(Var),
    Mean(Var),
    Transpose(Var),
    Reshape(Var),
    ConcatRows(Vec<Var>),
    SliceRows {
        x: Var,
        start: usize,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    GatherRows {
        table: Var,
        ids: Vec<usize>,
    },
    RepeatRows(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        weights: Vec<f64>,
        probs: Vec<f64>,
    },
    BceWithLogits {
        logits: Var,
        targets: Vec<f64>,
        weights: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Batch layout of a broadcast matrix product.
#[derive(Debug, Clone)]
struct BatchPlan {
    m: usize,
    k: usize,
    n: usize,
    /// (a batch offset, b batch offset) per output batch entry.
    pairs: Vec<(usize, usize)>,
}

/// Gradients produced by one backward pass.
#[derive(Debug)]
pub struct Gradients {
    by_node: Vec<Option<Vec<f64>>>,
    params: Vec<(ParamId, usize)>,
}

impl Gradients {
    /// Gradient with respect to any node, if it depends on a trainable leaf.
    pub fn wrt(&self, var: Var) -> Option<&[f64]> {
        self.by_node.get(var.0).and_then(|g| g.as_deref())
    }

    pub fn param(&self, id: ParamId) -> Option<&[f64]> {
        self.params
            .iter()
            .find(|(p, _)| *p == id)
            .and_then(|(_, n)| self.by_node[*n].as_deref())
    }

    /// Every parameter reached by the pass, with its gradient.
    pub fn params(&self) -> impl Iterator<Item = (ParamId, &[f64])> {
        self.params
            .iter()
            .filter_map(|(p, n)| self.by_node[*n].as_deref().map(|g| (*p, g)))
    }
}

/// Recording tape over optional model parameters.
pub struct Graph<'a> {
    store: Option<&'a ParamStore>,
    nodes: Vec<Node>,
    param_vars: HashMap<ParamId, Var>,
}

impl Default for Graph<'_> {
    fn default() -> Self {
        Self::new()
    }
}

fn mismatch(op: &'static str, a: &[usize], b: &[usize]) -> Error {
    Error::ShapeMismatch {
        op,
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    }
}

impl<'a> Graph<'a> {
    pub fn new() -> Self {
        Self {
            store: None,
            nodes: Vec::new(),
            param_vars: HashMap::new(),
        }
    }

    pub fn with_params(store: &'a ParamStore) -> Self {
        Self {
            store: Some(store),
            nodes: Vec::new(),
            param_vars: HashMap::new(),
        }
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

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn vals(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.values()
    }

    /// Records a leaf. It is differentiable iff `tensor.requires_grad()`.
    pub fn input(&mut self, tensor: Tensor) -> Var {
        let ng = tensor.requires_grad();
        self.push(tensor, Op::Leaf, ng)
    }

    /// Records a non-differentiable leaf.
    pub fn constant(&mut self, tensor: Tensor) -> Var {
        self.push(tensor, Op::Leaf, false)
    }

    /// Leaf bound to a stored parameter; repeated calls reuse the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let store = self.store.expect("graph has no parameter store");
        let p = store.get(id);
        let mut value = p.tensor.clone();
        value.clear_grad();
        let v = self.push(value, Op::Param, !p.frozen);
        self.param_vars.insert(id, v);
        v
    }

    // ---------------------------------------------------------------- linear algebra

    /// Matrix product over the last two axes with broadcast leading axes.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() < 2 || sb.len() < 2 || sa[sa.len() - 1] != sb[sb.len() - 2] {
            return Err(mismatch("matmul", &sa, &sb));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let n = sb[sb.len() - 1];
        let ba = &sa[..sa.len() - 2];
        let bb = &sb[..sb.len() - 2];
        let rank = ba.len().max(bb.len());
        let pad = |s: &[usize]| {
            let mut p = vec![1; rank - s.len()];
            p.extend_from_slice(s);
            p
        };
        let (pa, pb) = (pad(ba), pad(bb));
        let mut batch = Vec::with_capacity(rank);
        for (&x, &y) in pa.iter().zip(&pb) {
            if x != y && x != 1 && y != 1 {
                return Err(mismatch("matmul", &sa, &sb));
            }
            batch.push(x.max(y));
        }
        let total: usize = batch.iter().product();
        let strides = |p: &[usize]| {
            let mut st = vec![0; rank];
            let mut acc = 1;
            for i in (0..rank).rev() {
                st[i] = if p[i] == 1 { 0 } else { acc };
                acc *= p[i];
            }
            st
        };
        let (sta, stb) = (strides(&pa), strides(&pb));
        let mut pairs = Vec::with_capacity(total);
        for flat in 0..total {
            let (mut rem, mut oa, mut ob) = (flat, 0, 0);
            for i in (0..rank).rev() {
                let idx = rem % batch[i];
                rem /= batch[i];
                oa += idx * sta[i];
                ob += idx * stb[i];
            }
            pairs.push((oa * m * k, ob * k * n));
        }
        let mut out = vec![0.0; total * m * n];
        {
            let (av, bv) = (self.vals(a), self.vals(b));
            for (bi, &(oa, ob)) in pairs.iter().enumerate() {
                gemm(
                    m,
                    k,
                    n,
                    av,
                    View::row_major(oa, k),
                    bv,
                    View::row_major(ob, n),
                    0.0,
                    &mut out,
                    View::row_major(bi * m * n, n),
                );
            }
        }
        let mut shape = batch;
        shape.extend([m, n]);
        let ng = self.ng(a) || self.ng(b);
        let plan = BatchPlan { m, k, n, pairs };
        Ok(self.push(Tensor::from_raw(shape, out), Op::MatMul { a, b, plan }, ng))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(Error::InvalidShape {
                op: "transpose",
                msg: format!("expected a matrix, got {s:?}"),
            });
        }
        let (r, c) = (s[0], s[1]);
        let v = self.vals(x);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = v[i * c + j];
            }
        }
        let ng = self.ng(x);
        Ok(self.push(Tensor::from_raw(vec![c, r], out), Op::Transpose(x), ng))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).reshaped(shape)?;
        let ng = self.ng(x);
        Ok(self.push(t, Op::Reshape(x), ng))
    }

    // ---------------------------------------------------------------- elementwise

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(mismatch(name, self.shape(a), self.shape(b)));
        }
        let out: Vec<f64> = self
            .vals(a)
            .iter()
            .zip(self.vals(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::from_raw(shape, out), op, ng))
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let out: Vec<f64> = self.vals(x).iter().map(|&v| f(v)).collect();
        let shape = self.shape(x).to_vec();
        let ng = self.ng(x);
        self.push(Tensor::from_raw(shape, out), op, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    /// Elementwise maximum; on ties the gradient flows to `a`.
    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("maximum", a, b, f64::max, Op::Maximum(a, b))
    }

    /// Elementwise minimum; on ties the gradient flows to `a`.
    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("minimum", a, b, f64::min, Op::Minimum(a, b))
    }

    /// `x + bias` where `bias` has one entry per column of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (_, cols) = self.value(x).rows_cols();
        if self.value(bias).len() != cols {
            return Err(mismatch("add_bias", self.shape(x), self.shape(bias)));
        }
        let b = self.vals(bias);
        let out: Vec<f64> = self
            .vals(x)
            .iter()
            .enumerate()
            .map(|(i, &v)| v + b[i % cols])
            .collect();
        let shape = self.shape(x).to_vec();
        let ng = self.ng(x) || self.ng(bias);
        Ok(self.push(Tensor::from_raw(shape, out), Op::AddBias(x, bias), ng))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        self.unary(x, |v| v * s, Op::Scale(x, s))
    }

    pub fn add_scalar(&mut self, x: Var, s: f64) -> Var {
        self.unary(x, |v| v + s, Op::AddScalar(x))
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.scale(x, -1.0)
    }

    /// `max(x, 0)`; the gradient at exactly 0 is 0.
    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(0.0), Op::Relu(x))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(x, gelu, Op::Gelu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, f64::abs, Op::Abs(x))
    }

    // ---------------------------------------------------------------- reductions

    /// Softmax along `axis`, stabilized by max subtraction.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::InvalidAxis {
                axis,
                rank: shape.len(),
            });
        }
        let (outer, len, inner) = axis_split(&shape, axis);
        let v = self.vals(x);
        let mut out = vec![0.0; v.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * len + j) * inner + i;
                let mx = (0..len).map(|j| v[idx(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for j in 0..len {
                    let e = (v[idx(j)] - mx).exp();
                    out[idx(j)] = e;
                    z += e;
                }
                for j in 0..len {
                    out[idx(j)] /= z;
                }
            }
        }
        let ng = self.ng(x);
        Ok(self.push(Tensor::from_raw(shape, out), Op::Softmax { x, axis }, ng))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.vals(x).iter().sum();
        let ng = self.ng(x);
        self.push(Tensor::scalar(s), Op::Sum(x), ng)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.vals(x);
        let s: f64 = v.iter().sum::<f64>() / v.len() as f64;
        let ng = self.ng(x);
        self.push(Tensor::scalar(s), Op::Mean(x), ng)
    }

    // ---------------------------------------------------------------- row plumbing

    pub fn concat_rows(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs.first().ok_or(Error::InvalidShape {
            op: "concat_rows",
            msg: "nothing to concatenate".into(),
        })?;
        let (_, cols) = self.value(first).rows_cols();
        let mut out = Vec::new();
        for &x in xs {
            let (_, c) = self.value(x).rows_cols();
            if c != cols {
                return Err(mismatch("concat_rows", self.shape(first), self.shape(x)));
            }
            out.extend_from_slice(self.vals(x));
        }
        let rows = out.len() / cols;
        let ng = xs.iter().any(|&x| self.ng(x));
        Ok(self.push(
            Tensor::from_raw(vec![rows, cols], out),
            Op::ConcatRows(xs.to_vec()),
            ng,
        ))
    }

    /// Rows `[start, end)`.
    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (rows, cols) = self.value(x).rows_cols();
        if start >= end || end > rows {
            return Err(Error::InvalidShape {
                op: "slice_rows",
                msg: format!("rows {start}..{end} out of range for {rows}"),
            });
        }
        let out = self.vals(x)[start * cols..end * cols].to_vec();
        let ng = self.ng(x);
        Ok(self.push(
            Tensor::from_raw(vec![end - start, cols], out),
            Op::SliceRows { x, start },
            ng,
        ))
    }

    /// Columns `[start, end)`.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (rows, cols) = self.value(x).rows_cols();
        if start >= end || end > cols {
            return Err(Error::InvalidShape {
                op: "slice_cols",
                msg: format!("columns {start}..{end} out of range for {cols}"),
            });
        }
        let v = self.vals(x);
        let w = end - start;
        let mut out = Vec::with_capacity(rows * w);
        for r in 0..rows {
            out.extend_from_slice(&v[r * cols + start..r * cols + end]);
        }
        let ng = self.ng(x);
        Ok(self.push(
            Tensor::from_raw(vec![rows, w], out),
            Op::SliceCols { x, start },
            ng,
        ))
    }

    /// Row lookup (embedding gather).
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (rows, cols) = self.value(table).rows_cols();
        if ids.is_empty() {
            return Err(Error::InvalidShape {
                op: "gather_rows",
                msg: "no ids".into(),
            });
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(Error::InvalidShape {
                op: "gather_rows",
                msg: format!("id {bad} out of range for {rows} rows"),
            });
        }
        let v = self.vals(table);
        let mut out = Vec::with_capacity(ids.len() * cols);
        for &i in ids {
            out.extend_from_slice(&v[i * cols..(i + 1) * cols]);
        }
        let ng = self.ng(table);
        Ok(self.push(
            Tensor::from_raw(vec![ids.len(), cols], out),
            Op::GatherRows {
                table,
                ids: ids.to_vec(),
            },
            ng,
        ))
    }

    /// Stacks a single row `n` times.
    pub fn repeat_rows(&mut self, x: Var, n: usize) -> Result<Var> {
        let (rows, cols) = self.value(x).rows_cols();
        if rows != 1 || n == 0 {
            return Err(Error::InvalidShape {
                op: "repeat_rows",
                msg: format!("expected one row repeated n>0 times, got {rows} rows, n={n}"),
            });
        }
        let row = self.vals(x).to_vec();
        let mut out = Vec::with_capacity(n * cols);
        for _ in 0..n {
            out.extend_from_slice(&row);
        }
        let ng = self.ng(x);
        Ok(self.push(Tensor::from_raw(vec![n, cols], out), Op::RepeatRows(x), ng))
    }

    // ---------------------------------------------------------------- fused layers

    /// Layer normalization over the last axis.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (rows, cols) = self.value(x).rows_cols();
        if self.value(gamma).len() != cols || self.value(beta).len() != cols {
            return Err(mismatch("layer_norm", self.shape(x), self.shape(gamma)));
        }
        let (v, gv, bv) = (self.vals(x), self.vals(gamma), self.vals(beta));
        let mut out = vec![0.0; rows * cols];
        let mut xhat = vec![0.0; rows * cols];
        let mut rstd = vec![0.0; rows];
        for r in 0..rows {
            let row = &v[r * cols..(r + 1) * cols];
            let mu = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|a| (a - mu) * (a - mu)).sum::<f64>() / cols as f64;
            let rs = 1.0 / (var + LN_EPS).sqrt();
            rstd[r] = rs;
            for c in 0..cols {
                let h = (row[c] - mu) * rs;
                xhat[r * cols + c] = h;
                out[r * cols + c] = h * gv[c] + bv[c];
            }
        }
        let shape = self.shape(x).to_vec();
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        Ok(self.push(
            Tensor::from_raw(shape, out),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            ng,
        ))
    }

    /// Multi-head scaled dot-product attention, `softmax(Q Kᵀ / √d_head) V`
    /// per head with heads concatenated along columns. With `causal`, query
    /// `i` only sees keys `0..=i`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, causal: bool) -> Result<Var> {
        let (sq, sk, sv) = (self.shape(q).to_vec(), self.shape(k).to_vec(), self.shape(v).to_vec());
        if sq.len() != 2 || sk.len() != 2 || sv.len() != 2 {
            return Err(Error::InvalidShape {
                op: "attention",
                msg: format!("expected matrices, got {sq:?}, {sk:?}, {sv:?}"),
            });
        }
        let (nq, d) = (sq[0], sq[1]);
        let (nk, dv) = (sv[0], sv[1]);
        if sk[1] != d {
            return Err(mismatch("attention (query/key features)", &sq, &sk));
        }
        if sk[0] != nk {
            return Err(mismatch("attention (key/value length)", &sk, &sv));
        }
        if heads == 0 || d % heads != 0 || dv % heads != 0 {
            return Err(Error::InvalidShape {
                op: "attention",
                msg: format!("{heads} heads do not divide widths {d} and {dv}"),
            });
        }
        if causal && nq != nk {
            return Err(mismatch("causal attention", &sq, &sk));
        }
        let (dh, dvh) = (d / heads, dv / heads);
        let scale = 1.0 / (dh as f64).sqrt();
        let mut probs = vec![0.0; heads * nq * nk];
        let mut out = vec![0.0; nq * dv];
        let (qv, kv, vv) = (self.vals(q), self.vals(k), self.vals(v));
        for h in 0..heads {
            let p = &mut probs[h * nq * nk..(h + 1) * nq * nk];
            gemm(
                nq,
                dh,
                nk,
                qv,
                View::row_major(h * dh, d),
                kv,
                View::transposed(h * dh, d),
                0.0,
                p,
                View::row_major(0, nk),
            );
            for i in 0..nq {
                let row = &mut p[i * nk..(i + 1) * nk];
                let visible = if causal { i + 1 } else { nk };
                let mut mx = f64::NEG_INFINITY;
                for s in row[..visible].iter_mut() {
                    *s *= scale;
                    mx = mx.max(*s);
                }
                let mut z = 0.0;
                for s in row[..visible].iter_mut() {
                    *s = (*s - mx).exp();
                    z += *s;
                }
                for s in row[..visible].iter_mut() {
                    *s /= z;
                }
                for s in row[visible..].iter_mut() {
                    *s = 0.0;
                }
            }
            gemm(
                nq,
                nk,
                dvh,
                p,
                View::row_major(0, nk),
                vv,
                View::row_major(h * dvh, dv),
                0.0,
                &mut out,
                View::row_major(h * dvh, dv),
            );
        }
        let ng = self.ng(q) || self.ng(k) || self.ng(v);
        Ok(self.push(
            Tensor::from_raw(vec![nq, dv], out),
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            },
            ng,
        ))
    }

    /// `Σ_i w_i · (−log softmax(logits_i)[t_i])` over the rows of `logits`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], weights: &[f64]) -> Result<Var> {
        let (rows, cols) = self.value(logits).rows_cols();
        if targets.len() != rows || weights.len() != rows {
            return Err(Error::InvalidShape {
                op: "cross_entropy",
                msg: format!(
                    "{rows} rows but {} targets and {} weights",
                    targets.len(),
                    weights.len()
                ),
            });
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= cols) {
            return Err(Error::InvalidShape {
                op: "cross_entropy",
                msg: format!("target {t} out of range for {cols} classes"),
            });
        }
        let v = self.vals(logits);
        let mut probs = vec![0.0; rows * cols];
        let mut loss = 0.0;
        for r in 0..rows {
            let row = &v[r * cols..(r + 1) * cols];
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|a| (a - mx).exp()).sum();
            let lse = mx + z.ln();
            for c in 0..cols {
                probs[r * cols + c] = (row[c] - lse).exp();
            }
            loss += weights[r] * (lse - row[targets[r]]);
        }
        let ng = self.ng(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
                probs,
            },
            ng,
        ))
    }

    /// `Σ_i w_i · BCE(sigmoid(x_i), y_i)`, evaluated stably from logits.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[f64], weights: &[f64]) -> Result<Var> {
        let n = self.value(logits).len();
        if targets.len() != n || weights.len() != n {
            return Err(Error::InvalidShape {
                op: "bce_with_logits",
                msg: format!(
                    "{n} logits but {} targets and {} weights",
                    targets.len(),
                    weights.len()
                ),
            });
        }
        let v = self.vals(logits);
        let loss: f64 = v
            .iter()
            .zip(targets)
            .zip(weights)
            .map(|((&x, &y), &w)| w * (x.max(0.0) - x * y + (-x.abs()).exp().ln_1p()))
            .sum();
        let ng = self.ng(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::BceWithLogits {
                logits,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
            },
            ng,
        ))
    }

    // ---------------------------------------------------------------- backward

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        if self.ng(loss) {
            grads[loss.0] = Some(vec![1.0]);
        }
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        let params = self
            .param_vars
            .iter()
            .filter(|(_, v)| v.0 <= loss.0)
            .map(|(&p, &v)| (p, v.0))
            .collect();
        Ok(Gradients {
            by_node: grads,
            params,
        })
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let out = node.value.values();
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::MatMul { a, b, plan } => {
                let BatchPlan { m, k, n, pairs } = plan;
                let (m, k, n) = (*m, *k, *n);
                if self.ng(*a) {
                    let bv = self.vals(*b);
                    let ga = slot(grads, *a, self.value(*a).len());
                    for (bi, &(oa, ob)) in pairs.iter().enumerate() {
                        gemm(
                            m,
                            n,
                            k,
                            g,
                            View::row_major(bi * m * n, n),
                            bv,
                            View::transposed(ob, n),
                            1.0,
                            ga,
                            View::row_major(oa, k),
                        );
                    }
                }
                if self.ng(*b) {
                    let av = self.vals(*a);
                    let gb = slot(grads, *b, self.value(*b).len());
                    for (bi, &(oa, ob)) in pairs.iter().enumerate() {
                        gemm(
                            k,
                            m,
                            n,
                            av,
                            View::transposed(oa, k),
                            g,
                            View::row_major(bi * m * n, n),
                            1.0,
                            gb,
                            View::row_major(ob, n),
                        );
                    }
                }
            }
            Op::Add(a, b) => {
                self.acc(grads, *a, g.iter().copied());
                self.acc(grads, *b, g.iter().copied());
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, g.iter().copied());
                self.acc(grads, *b, g.iter().map(|v| -v));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.vals(*a), self.vals(*b));
                self.acc(grads, *a, g.iter().zip(bv).map(|(g, y)| g * y));
                self.acc(grads, *b, g.iter().zip(av).map(|(g, x)| g * x));
            }
            Op::Div(a, b) => {
                let (av, bv) = (self.vals(*a), self.vals(*b));
                self.acc(grads, *a, g.iter().zip(bv).map(|(g, y)| g / y));
                self.acc(
                    grads,
                    *b,
                    g.iter().zip(av.iter().zip(bv)).map(|(g, (x, y))| -g * x / (y * y)),
                );
            }
            Op::Maximum(a, b) | Op::Minimum(a, b) => {
                let is_max = matches!(node.op, Op::Maximum(..));
                let (av, bv) = (self.vals(*a), self.vals(*b));
                let pick_a: Vec<bool> = av
                    .iter()
                    .zip(bv)
                    .map(|(x, y)| if is_max { x >= y } else { x <= y })
                    .collect();
                self.acc(
                    grads,
                    *a,
                    g.iter().zip(&pick_a).map(|(g, &p)| if p { *g } else { 0.0 }),
                );
                self.acc(
                    grads,
                    *b,
                    g.iter().zip(&pick_a).map(|(g, &p)| if p { 0.0 } else { *g }),
                );
            }
            Op::AddBias(x, bias) => {
                self.acc(grads, *x, g.iter().copied());
                if self.ng(*bias) {
                    let cols = self.value(*bias).len();
                    let mut gb = vec![0.0; cols];
                    for (i, v) in g.iter().enumerate() {
                        gb[i % cols] += v;
                    }
                    self.acc(grads, *bias, gb.into_iter());
                }
            }
            Op::Scale(x, s) => self.acc(grads, *x, g.iter().map(|v| v * s)),
            Op::AddScalar(x) | Op::Reshape(x) => self.acc(grads, *x, g.iter().copied()),
            Op::Relu(x) => {
                let xv = self.vals(*x);
                self.acc(
                    grads,
                    *x,
                    g.iter().zip(xv).map(|(g, &v)| if v > 0.0 { *g } else { 0.0 }),
                );
            }
            Op::Gelu(x) => {
                let xv = self.vals(*x);
                self.acc(grads, *x, g.iter().zip(xv).map(|(g, &v)| g * gelu_grad(v)));
            }
            Op::Sigmoid(x) => {
                self.acc(grads, *x, g.iter().zip(out).map(|(g, &s)| g * s * (1.0 - s)));
            }
            Op::Abs(x) => {
                let xv = self.vals(*x);
                self.acc(grads, *x, g.iter().zip(xv).map(|(g, &v)| g * sign(v)));
            }
            Op::Softmax { x, axis } => {
                let shape = node.value.shape();
                let (outer, len, inner) = axis_split(shape, *axis);
                let mut gx = vec![0.0; out.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |j: usize| (o * len + j) * inner + i;
                        let dot: f64 = (0..len).map(|j| g[idx(j)] * out[idx(j)]).sum();
                        for j in 0..len {
                            gx[idx(j)] = out[idx(j)] * (g[idx(j)] - dot);
                        }
                    }
                }
                self.acc(grads, *x, gx.into_iter());
            }
            Op::Sum(x) => {
                let n = self.value(*x).len();
                self.acc(grads, *x, std::iter::repeat_n(g[0], n));
            }
            Op::Mean(x) => {
                let n = self.value(*x).len();
                self.acc(grads, *x, std::iter::repeat_n(g[0] / n as f64, n));
            }
            Op::Transpose(x) => {
                let s = node.value.shape();
                let (c, r) = (s[0], s[1]);
                let mut gx = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        gx[i * c + j] = g[j * r + i];
                    }
                }
                self.acc(grads, *x, gx.into_iter());
            }
            Op::ConcatRows(xs) => {
                let mut off = 0;
                for &x in xs {
                    let n = self.value(x).len();
                    self.acc(grads, x, g[off..off + n].iter().copied());
                    off += n;
                }
            }
            Op::SliceRows { x, start } => {
                if self.ng(*x) {
                    let (_, cols) = self.value(*x).rows_cols();
                    let gx = slot(grads, *x, self.value(*x).len());
                    let off = start * cols;
                    for (i, v) in g.iter().enumerate() {
                        gx[off + i] += v;
                    }
                }
            }
            Op::SliceCols { x, start } => {
                if self.ng(*x) {
                    let (rows, cols) = self.value(*x).rows_cols();
                    let w = g.len() / rows;
                    let gx = slot(grads, *x, rows * cols);
                    for r in 0..rows {
                        for c in 0..w {
                            gx[r * cols + start + c] += g[r * w + c];
                        }
                    }
                }
            }
            Op::GatherRows { table, ids } => {
                if self.ng(*table) {
                    let (_, cols) = self.value(*table).rows_cols();
                    let gt = slot(grads, *table, self.value(*table).len());
                    for (r, &id) in ids.iter().enumerate() {
                        for c in 0..cols {
                            gt[id * cols + c] += g[r * cols + c];
                        }
                    }
                }
            }
            Op::RepeatRows(x) => {
                let cols = self.value(*x).len();
                let mut gx = vec![0.0; cols];
                for (i, v) in g.iter().enumerate() {
                    gx[i % cols] += v;
                }
                self.acc(grads, *x, gx.into_iter());
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let cols = self.value(*gamma).len();
                let rows = rstd.len();
                let gv = self.vals(*gamma);
                if self.ng(*gamma) || self.ng(*beta) {
                    let mut gg = vec![0.0; cols];
                    let mut gb = vec![0.0; cols];
                    for r in 0..rows {
                        for c in 0..cols {
                            gg[c] += g[r * cols + c] * xhat[r * cols + c];
                            gb[c] += g[r * cols + c];
                        }
                    }
                    self.acc(grads, *gamma, gg.into_iter());
                    self.acc(grads, *beta, gb.into_iter());
                }
                if self.ng(*x) {
                    let mut gx = vec![0.0; rows * cols];
                    for r in 0..rows {
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for c in 0..cols {
                            let d = g[r * cols + c] * gv[c];
                            m1 += d;
                            m2 += d * xhat[r * cols + c];
                        }
                        m1 /= cols as f64;
                        m2 /= cols as f64;
                        for c in 0..cols {
                            let d = g[r * cols + c] * gv[c];
                            gx[r * cols + c] = rstd[r] * (d - m1 - xhat[r * cols + c] * m2);
                        }
                    }
                    self.acc(grads, *x, gx.into_iter());
                }
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            } => self.attention_backward(*q, *k, *v, *heads, probs, g, grads),
            Op::CrossEntropy {
                logits,
                targets,
                weights,
                probs,
            } => {
                let (rows, cols) = self.value(*logits).rows_cols();
                let mut gl = probs.clone();
                for r in 0..rows {
                    gl[r * cols + targets[r]] -= 1.0;
                    for c in 0..cols {
                        gl[r * cols + c] *= g[0] * weights[r];
                    }
                }
                self.acc(grads, *logits, gl.into_iter());
            }
            Op::BceWithLogits {
                logits,
                targets,
                weights,
            } => {
                let xv = self.vals(*logits);
                self.acc(
                    grads,
                    *logits,
                    xv.iter()
                        .zip(targets)
                        .zip(weights)
                        .map(|((&x, &y), &w)| g[0] * w * (sigmoid(x) - y)),
                );
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
        let (nq, d) = (self.shape(q)[0], self.shape(q)[1]);
        let (nk, dv) = (self.shape(v)[0], self.shape(v)[1]);
        let (dh, dvh) = (d / heads, dv / heads);
        let scale = 1.0 / (dh as f64).sqrt();
        let (qv, kv, vv) = (self.vals(q), self.vals(k), self.vals(v));
        let mut gq = vec![0.0; nq * d];
        let mut gk = vec![0.0; nk * d];
        let mut gvv = vec![0.0; nk * dv];
        let mut dp = vec![0.0; nq * nk];
        for h in 0..heads {
            let p = &probs[h * nq * nk..(h + 1) * nq * nk];
            // dV_h = Pᵀ dO_h
            gemm(
                nk,
                nq,
                dvh,
                p,
                View::transposed(0, nk),
                g,
                View::row_major(h * dvh, dv),
                1.0,
                &mut gvv,
                View::row_major(h * dvh, dv),
            );
            // dP = dO_h V_hᵀ
            gemm(
                nq,
                dvh,
                nk,
                g,
                View::row_major(h * dvh, dv),
                vv,
                View::transposed(h * dvh, dv),
                0.0,
                &mut dp,
                View::row_major(0, nk),
            );
            for i in 0..nq {
                let pr = &p[i * nk..(i + 1) * nk];
                let dr = &mut dp[i * nk..(i + 1) * nk];
                let dot: f64 = pr.iter().zip(dr.iter()).map(|(a, b)| a * b).sum();
                for (dv_, &pv) in dr.iter_mut().zip(pr) {
                    *dv_ = pv * (*dv_ - dot) * scale;
                }
            }
            // dQ_h = dS K_h ; dK_h = dSᵀ Q_h
            gemm(
                nq,
                nk,
                dh,
                &dp,
                View::row_major(0, nk),
                kv,
                View::row_major(h * dh, d),
                1.0,
                &mut gq,
                View::row_major(h * dh, d),
            );
            gemm(
                nk,
                nq,
                dh,
                &dp,
                View::transposed(0, nk),
                qv,
                View::row_major(h * dh, d),
                1.0,
                &mut gk,
                View::row_major(h * dh, d),
            );
        }
        self.acc(grads, q, gq.into_iter());
        self.acc(grads, k, gk.into_iter());
        self.acc(grads, v, gvv.into_iter());
    }

    fn acc(&self, grads: &mut [Option<Vec<f64>>], x: Var, delta: impl Iterator<Item = f64>) {
        if !self.ng(x) {
            return;
        }
        let n = self.value(x).len();
        let gx = slot(grads, x, n);
        for (a, b) in gx.iter_mut().zip(delta) {
            *a += b;
        }
    }
}

fn slot(grads: &mut [Option<Vec<f64>>], x: Var, n: usize) -> &mut Vec<f64> {
    grads[x.0].get_or_insert_with(|| vec![0.0; n])
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}
