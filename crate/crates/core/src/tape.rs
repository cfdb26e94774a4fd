//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Tape`] records every operation of one forward pass. Leaves either own
//! their value or borrow it (frozen weights and parameters are borrowed from
//! a [`ParamStore`](crate::params::ParamStore) for the lifetime of the tape),
//! so a step never copies the model. Nodes whose inputs carry no gradient are
//! marked as such and skipped on the way back, which keeps frozen-backbone
//! passes at roughly the cost of one extra forward.

use alloc::borrow::Cow;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::{self, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Silu(Var),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        stats: Vec<(f64, f64)>,
    },
    Softmax(Var),
    Transpose(Var),
    Reshape(Var),
    SliceFlat {
        src: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    GatherRows {
        src: Var,
        index: Vec<usize>,
    },
    GroupMean {
        src: Var,
        sizes: Vec<usize>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        q_seq: usize,
        kv_seq: usize,
        probs: Vec<f64>,
    },
    Sum(Var),
    BceWithLogits {
        logits: Var,
        labels: Vec<u8>,
    },
}

struct Node<'a, S: Real> {
    value: Cow<'a, Tensor<S>>,
    op: Op,
    requires_grad: bool,
}

pub struct Tape<'a, S: Real = f32> {
    nodes: Vec<Node<'a, S>>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients<S: Real> {
    grads: Vec<Option<Tensor<S>>>,
}

impl<S: Real> Gradients<S> {
    pub fn get(&self, v: Var) -> Option<&Tensor<S>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<S>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

impl<'a, S: Real> Default for Tape<'a, S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'a, S: Real> Tape<'a, S> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn data(&self, v: Var) -> &[S] {
        self.nodes[v.0].value.data()
    }

    fn push_leaf(&mut self, value: Cow<'a, Tensor<S>>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor<S>, op: Op, inputs: &[Var], name: &'static str) -> Result<Var> {
        value.ensure_finite(name)?;
        let requires_grad = inputs.iter().any(|&v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Owned constant (no gradient).
    pub fn leaf(&mut self, value: Tensor<S>) -> Var {
        self.push_leaf(Cow::Owned(value), false)
    }

    /// Borrowed constant (no gradient), e.g. a frozen weight.
    pub fn constant(&mut self, value: &'a Tensor<S>) -> Var {
        self.push_leaf(Cow::Borrowed(value), false)
    }

    /// Borrowed trainable leaf.
    pub fn param(&mut self, value: &'a Tensor<S>) -> Var {
        self.push_leaf(Cow::Borrowed(value), true)
    }

    /// Owned trainable leaf.
    pub fn param_owned(&mut self, value: Tensor<S>) -> Var {
        self.push_leaf(Cow::Owned(value), true)
    }

    fn matrix(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        let s = self.shape(v);
        if s.len() != 2 {
            return Err(Error::shape(op, s, &[0, 0]));
        }
        Ok((s[0], s[1]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix(a, "matmul")?;
        let (k2, n) = self.matrix(b, "matmul")?;
        if k != k2 {
            return Err(Error::shape("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![S::ZERO; m * n];
        tensor::mm(self.data(a), self.data(b), m, k, n, &mut out);
        self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), &[a, b], "matmul")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        self.push(out, Op::Add(a, b), &[a, b], "add")
    }

    /// `a[m×n] + b[n]`, broadcasting `b` over rows.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let (_, n) = self.value(a).dims2();
        if self.value(b).numel() != n {
            return Err(Error::shape("add_row", self.shape(a), self.shape(b)));
        }
        let bias = self.data(b);
        let data: Vec<S> = self
            .data(a)
            .chunks_exact(n.max(1))
            .flat_map(|row| row.iter().zip(bias).map(|(x, y)| S::from_f64(x.to_f64() + y.to_f64())))
            .collect();
        let out = Tensor::new(self.shape(a).to_vec(), data)?;
        self.push(out, Op::AddRow(a, b), &[a, b], "add_row")
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        self.push(out, Op::Mul(a, b), &[a, b], "mul")
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let out = self.value(a).scale(c);
        self.push(out, Op::Scale(a, c), &[a], "scale")
    }

    pub fn silu(&mut self, a: Var) -> Result<Var> {
        let out = tensor::silu(self.value(a));
        self.push(out, Op::Silu(a), &[a], "silu")
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let out = tensor::gelu(self.value(a));
        self.push(out, Op::Gelu(a), &[a], "gelu")
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (_, d) = self.value(x).dims2();
        if d == 0 {
            return Err(Error::InvalidArgument("layer_norm over an empty axis".into()));
        }
        if self.value(gamma).numel() != d || self.value(beta).numel() != d {
            return Err(Error::shape("layer_norm", self.shape(x), self.shape(gamma)));
        }
        let mut out = vec![S::ZERO; self.value(x).numel()];
        let stats = tensor::layer_norm_rows(self.data(x), self.data(gamma), self.data(beta), d, &mut out);
        let out = Tensor::new(self.shape(x).to_vec(), out)?;
        self.push(out, Op::LayerNorm { x, gamma, beta, stats }, &[x, gamma, beta], "layer_norm")
    }

    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let out = tensor::softmax_lastdim(self.value(a));
        self.push(out, Op::Softmax(a), &[a], "softmax")
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).transpose()?;
        self.push(out, Op::Transpose(a), &[a], "transpose")
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).reshape(shape)?;
        self.push(out, Op::Reshape(a), &[a], "reshape")
    }

    /// Contiguous flat range `[start, start + numel(shape))` reshaped to `shape`.
    pub fn slice_flat(&mut self, src: Var, start: usize, shape: &[usize]) -> Result<Var> {
        let len: usize = shape.iter().product();
        let total = self.value(src).numel();
        if start + len > total {
            return Err(Error::IndexOutOfRange {
                index: start + len,
                len: total,
            });
        }
        let out = Tensor::new(shape.to_vec(), self.data(src)[start..start + len].to_vec())?;
        self.push(out, Op::SliceFlat { src, start }, &[src], "slice_flat")
    }

    /// Concatenates matrices with equal row counts along columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.matrix(parts[0], "concat_cols")?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.matrix(p, "concat_cols")?;
            if r != rows {
                return Err(Error::shape("concat_cols", self.shape(parts[0]), self.shape(p)));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.data(p)[r * w..(r + 1) * w]);
            }
        }
        let out = Tensor::new(vec![rows, total], out)?;
        self.push(out, Op::ConcatCols(parts.to_vec()), parts, "concat_cols")
    }

    /// Concatenates matrices with equal column counts along rows.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = self.value(parts[0]).dims2().1;
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (r, c) = self.value(p).dims2();
            if c != cols {
                return Err(Error::shape("concat_rows", self.shape(parts[0]), self.shape(p)));
            }
            rows += r;
            out.extend_from_slice(self.data(p));
        }
        let out = Tensor::new(vec![rows, cols], out)?;
        self.push(out, Op::ConcatRows(parts.to_vec()), parts, "concat_rows")
    }

    pub fn gather_rows(&mut self, src: Var, index: &[usize]) -> Result<Var> {
        let (rows, cols) = self.value(src).dims2();
        let mut out = Vec::with_capacity(index.len() * cols);
        for &i in index {
            if i >= rows {
                return Err(Error::IndexOutOfRange { index: i, len: rows });
            }
            out.extend_from_slice(&self.data(src)[i * cols..(i + 1) * cols]);
        }
        let out = Tensor::new(vec![index.len(), cols], out)?;
        self.push(
            out,
            Op::GatherRows {
                src,
                index: index.to_vec(),
            },
            &[src],
            "gather_rows",
        )
    }

    /// Mean of consecutive row groups of the given sizes.
    pub fn group_mean(&mut self, src: Var, sizes: &[usize]) -> Result<Var> {
        let (rows, cols) = self.value(src).dims2();
        if sizes.iter().sum::<usize>() != rows || sizes.contains(&0) {
            return Err(Error::shape("group_mean", self.shape(src), sizes));
        }
        let data = self.data(src);
        let mut out = Vec::with_capacity(sizes.len() * cols);
        let mut start = 0;
        for &n in sizes {
            for c in 0..cols {
                let s: f64 = (start..start + n).map(|r| data[r * cols + c].to_f64()).sum();
                out.push(S::from_f64(s / n as f64));
            }
            start += n;
        }
        let out = Tensor::new(vec![sizes.len(), cols], out)?;
        self.push(
            out,
            Op::GroupMean {
                src,
                sizes: sizes.to_vec(),
            },
            &[src],
            "group_mean",
        )
    }

    /// Multi-head scaled dot-product self-attention over blocks of `seq`
    /// consecutive rows. `q`, `k`, `v` are `[blocks·seq × D]`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, seq: usize) -> Result<Var> {
        self.attention_cross(q, k, v, heads, seq, seq)
    }

    /// Blocked multi-head attention where each block has `q_seq` query rows
    /// and `kv_seq` key/value rows: `q` is `[blocks·q_seq × D]`, `k` and `v`
    /// are `[blocks·kv_seq × D]`.
    pub fn attention_cross(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        q_seq: usize,
        kv_seq: usize,
    ) -> Result<Var> {
        let (q_rows, d) = self.matrix(q, "attention")?;
        let (kv_rows, dk) = self.matrix(k, "attention")?;
        if self.shape(v) != self.shape(k) || dk != d {
            return Err(Error::shape("attention", self.shape(q), self.shape(k)));
        }
        if heads == 0 || d % heads != 0 || q_seq == 0 || kv_seq == 0 || q_rows % q_seq != 0 {
            return Err(Error::InvalidArgument("attention: incompatible heads/seq".into()));
        }
        let blocks = q_rows / q_seq;
        if blocks * kv_seq != kv_rows {
            return Err(Error::shape("attention", self.shape(q), self.shape(k)));
        }
        let dh = d / heads;
        let scale = 1.0 / libm::sqrt(dh as f64);
        let qd = tensor::to_f64_buf(self.data(q));
        let kd = tensor::to_f64_buf(self.data(k));
        let vd = tensor::to_f64_buf(self.data(v));
        let mut probs = vec![0.0f64; blocks * heads * q_seq * kv_seq];
        let mut out = vec![S::ZERO; q_rows * d];
        let mut acc = vec![0.0f64; dh];
        for b in 0..blocks {
            for h in 0..heads {
                let base = (b * heads + h) * q_seq * kv_seq;
                let p = &mut probs[base..base + q_seq * kv_seq];
                let kcol = |r: usize| (b * kv_seq + r) * d + h * dh;
                for i in 0..q_seq {
                    let qo = (b * q_seq + i) * d + h * dh;
                    let qi = &qd[qo..qo + dh];
                    let prow = &mut p[i * kv_seq..(i + 1) * kv_seq];
                    let mut max = f64::NEG_INFINITY;
                    for j in 0..kv_seq {
                        let kj = &kd[kcol(j)..kcol(j) + dh];
                        let s: f64 = qi.iter().zip(kj).map(|(x, y)| x * y).sum::<f64>() * scale;
                        prow[j] = s;
                        max = max.max(s);
                    }
                    let mut total = 0.0;
                    for pj in prow.iter_mut() {
                        *pj = libm::exp(*pj - max);
                        total += *pj;
                    }
                    acc.iter_mut().for_each(|a| *a = 0.0);
                    for j in 0..kv_seq {
                        prow[j] /= total;
                        let vj = &vd[kcol(j)..kcol(j) + dh];
                        for (a, &x) in acc.iter_mut().zip(vj) {
                            *a += prow[j] * x;
                        }
                    }
                    for (o, &a) in out[qo..qo + dh].iter_mut().zip(&acc) {
                        *o = S::from_f64(a);
                    }
                }
            }
        }
        let out = Tensor::new(vec![q_rows, d], out)?;
        self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                heads,
                q_seq,
                kv_seq,
                probs,
            },
            &[q, k, v],
            "attention",
        )
    }

    /// Sum of all elements, as a `[1]` tensor.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).sum_f64();
        self.push(Tensor::scalar(S::from_f64(s)), Op::Sum(a), &[a], "sum")
    }

    /// Sum over rows of stable BCE between logits `[n×1]` (or `[n]`) and labels.
    pub fn bce_with_logits_sum(&mut self, logits: Var, labels: &[u8]) -> Result<Var> {
        if self.value(logits).numel() != labels.len() {
            return Err(Error::shape("bce_with_logits", self.shape(logits), &[labels.len()]));
        }
        let s: f64 = self
            .data(logits)
            .iter()
            .zip(labels)
            .map(|(z, &y)| tensor::bce_with_logits(z.to_f64(), y))
            .sum();
        self.push(
            Tensor::scalar(S::from_f64(s)),
            Op::BceWithLogits {
                logits,
                labels: labels.to_vec(),
            },
            &[logits],
            "bce_with_logits",
        )
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<S>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::InvalidArgument(alloc::format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::new(self.shape(loss).to_vec(), vec![S::ONE])?);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backward_node(idx, &g, &mut grads)?;
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<S>>], v: Var, g: Tensor<S>) {
        match &mut grads[v.0] {
            slot @ None => *slot = Some(g),
            Some(existing) => {
                for (e, x) in existing.data_mut().iter_mut().zip(g.data()) {
                    *e = S::from_f64(e.to_f64() + x.to_f64());
                }
            }
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backward_node(&self, idx: usize, g: &Tensor<S>, grads: &mut [Option<Tensor<S>>]) -> Result<()> {
        let gd = g.data();
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.value(*a).dims2();
                let n = self.value(*b).dims2().1;
                if self.wants(*a) {
                    let mut da = vec![S::ZERO; m * k];
                    tensor::mm_nt(gd, self.data(*b), m, n, k, &mut da);
                    self.accumulate(grads, *a, Tensor::new(vec![m, k], da)?);
                }
                if self.wants(*b) {
                    let mut db = vec![S::ZERO; k * n];
                    tensor::mm_tn(self.data(*a), gd, m, k, n, &mut db);
                    self.accumulate(grads, *b, Tensor::new(vec![k, n], db)?);
                }
            }
            Op::Add(a, b) => {
                if self.wants(*a) {
                    self.accumulate(grads, *a, g.clone());
                }
                if self.wants(*b) {
                    self.accumulate(grads, *b, g.clone());
                }
            }
            Op::AddRow(a, b) => {
                if self.wants(*a) {
                    self.accumulate(grads, *a, g.clone());
                }
                if self.wants(*b) {
                    let n = self.value(*b).numel();
                    let mut acc = vec![0.0f64; n];
                    for row in gd.chunks_exact(n) {
                        for (s, x) in acc.iter_mut().zip(row) {
                            *s += x.to_f64();
                        }
                    }
                    let db = acc.into_iter().map(S::from_f64).collect();
                    self.accumulate(grads, *b, Tensor::new(self.shape(*b).to_vec(), db)?);
                }
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    let da = g.zip_map(self.value(*b), |x, y| x * y)?;
                    self.accumulate(grads, *a, da);
                }
                if self.wants(*b) {
                    let db = g.zip_map(self.value(*a), |x, y| x * y)?;
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Scale(a, c) => {
                let c = *c;
                self.accumulate(grads, *a, g.scale(c));
            }
            Op::Silu(a) => {
                let da = g.zip_map(self.value(*a), |gy, x| gy * tensor::silu_grad(x))?;
                self.accumulate(grads, *a, da);
            }
            Op::Gelu(a) => {
                let da = g.zip_map(self.value(*a), |gy, x| gy * tensor::gelu_grad(x))?;
                self.accumulate(grads, *a, da);
            }
            Op::LayerNorm { x, gamma, beta, stats } => {
                let xv = self.data(*x);
                let gam = self.data(*gamma);
                let d = gam.len();
                let want_x = self.wants(*x);
                let mut dx = if want_x { vec![S::ZERO; xv.len()] } else { Vec::new() };
                let mut dgamma = vec![0.0f64; d];
                let mut dbeta = vec![0.0f64; d];
                let mut dxhat = vec![0.0f64; d];
                let mut xhat = vec![0.0f64; d];
                for (r, &(mean, rstd)) in stats.iter().enumerate() {
                    let xr = &xv[r * d..(r + 1) * d];
                    let gr = &gd[r * d..(r + 1) * d];
                    let mut sum_dxhat = 0.0;
                    let mut sum_dxhat_xhat = 0.0;
                    for c in 0..d {
                        xhat[c] = (xr[c].to_f64() - mean) * rstd;
                        let gy = gr[c].to_f64();
                        dgamma[c] += gy * xhat[c];
                        dbeta[c] += gy;
                        dxhat[c] = gy * gam[c].to_f64();
                        sum_dxhat += dxhat[c];
                        sum_dxhat_xhat += dxhat[c] * xhat[c];
                    }
                    if want_x {
                        let inv_d = 1.0 / d as f64;
                        for c in 0..d {
                            let v = rstd * (dxhat[c] - sum_dxhat * inv_d - xhat[c] * sum_dxhat_xhat * inv_d);
                            dx[r * d + c] = S::from_f64(v);
                        }
                    }
                }
                if want_x {
                    self.accumulate(grads, *x, Tensor::new(self.shape(*x).to_vec(), dx)?);
                }
                if self.wants(*gamma) {
                    let t = Tensor::new(self.shape(*gamma).to_vec(), dgamma.into_iter().map(S::from_f64).collect())?;
                    self.accumulate(grads, *gamma, t);
                }
                if self.wants(*beta) {
                    let t = Tensor::new(self.shape(*beta).to_vec(), dbeta.into_iter().map(S::from_f64).collect())?;
                    self.accumulate(grads, *beta, t);
                }
            }
            Op::Softmax(a) => {
                let y = self.nodes[idx].value.data();
                let (_, d) = g.dims2();
                let mut da = vec![S::ZERO; y.len()];
                for ((yr, gr), dr) in y.chunks_exact(d).zip(gd.chunks_exact(d)).zip(da.chunks_exact_mut(d)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p.to_f64() * q.to_f64()).sum();
                    for ((o, p), q) in dr.iter_mut().zip(yr).zip(gr) {
                        *o = S::from_f64(p.to_f64() * (q.to_f64() - dot));
                    }
                }
                self.accumulate(grads, *a, Tensor::new(self.shape(*a).to_vec(), da)?);
            }
            Op::Transpose(a) => {
                self.accumulate(grads, *a, g.transpose()?);
            }
            Op::Reshape(a) => {
                self.accumulate(grads, *a, g.reshape(self.shape(*a))?);
            }
            Op::SliceFlat { src, start } => {
                let mut ds = Tensor::zeros(self.shape(*src));
                ds.data_mut()[*start..*start + gd.len()].copy_from_slice(gd);
                self.accumulate(grads, *src, ds);
            }
            Op::ConcatCols(parts) => {
                let (rows, total) = g.dims2();
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).dims2().1;
                    if self.wants(p) {
                        let mut dp = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            dp.extend_from_slice(&gd[r * total + offset..r * total + offset + w]);
                        }
                        self.accumulate(grads, p, Tensor::new(self.shape(p).to_vec(), dp)?);
                    }
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).numel();
                    if self.wants(p) {
                        let dp = gd[offset..offset + n].to_vec();
                        self.accumulate(grads, p, Tensor::new(self.shape(p).to_vec(), dp)?);
                    }
                    offset += n;
                }
            }
            Op::GatherRows { src, index } => {
                let cols = self.value(*src).dims2().1;
                let mut acc = vec![0.0f64; self.value(*src).numel()];
                for (r, &i) in index.iter().enumerate() {
                    for c in 0..cols {
                        acc[i * cols + c] += gd[r * cols + c].to_f64();
                    }
                }
                let ds = Tensor::new(self.shape(*src).to_vec(), acc.into_iter().map(S::from_f64).collect())?;
                self.accumulate(grads, *src, ds);
            }
            Op::GroupMean { src, sizes } => {
                let cols = self.value(*src).dims2().1;
                let mut ds = Vec::with_capacity(self.value(*src).numel());
                for (gi, &n) in sizes.iter().enumerate() {
                    let row = &gd[gi * cols..(gi + 1) * cols];
                    for _ in 0..n {
                        ds.extend(row.iter().map(|v| S::from_f64(v.to_f64() / n as f64)));
                    }
                }
                self.accumulate(grads, *src, Tensor::new(self.shape(*src).to_vec(), ds)?);
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                q_seq,
                kv_seq,
                probs,
            } => {
                let (q, k, v, heads, q_seq, kv_seq) = (*q, *k, *v, *heads, *q_seq, *kv_seq);
                let (q_rows, d) = self.value(q).dims2();
                let kv_rows = self.value(k).dims2().0;
                let dh = d / heads;
                let scale = 1.0 / libm::sqrt(dh as f64);
                let blocks = q_rows / q_seq;
                let qd = tensor::to_f64_buf(self.data(q));
                let kd = tensor::to_f64_buf(self.data(k));
                let vd = tensor::to_f64_buf(self.data(v));
                let go = tensor::to_f64_buf(gd);
                let mut dq = vec![0.0f64; q_rows * d];
                let mut dk = vec![0.0f64; kv_rows * d];
                let mut dv = vec![0.0f64; kv_rows * d];
                let mut dp = vec![0.0f64; kv_seq];
                for b in 0..blocks {
                    for h in 0..heads {
                        let base = (b * heads + h) * q_seq * kv_seq;
                        let p = &probs[base..base + q_seq * kv_seq];
                        let kcol = |r: usize| (b * kv_seq + r) * d + h * dh;
                        for i in 0..q_seq {
                            let qo = (b * q_seq + i) * d + h * dh;
                            let gi = &go[qo..qo + dh];
                            let prow = &p[i * kv_seq..(i + 1) * kv_seq];
                            let mut dot = 0.0;
                            for j in 0..kv_seq {
                                let vj = &vd[kcol(j)..kcol(j) + dh];
                                dp[j] = gi.iter().zip(vj).map(|(x, y)| x * y).sum();
                                dot += dp[j] * prow[j];
                                let pij = prow[j];
                                for (dvc, &gc) in dv[kcol(j)..kcol(j) + dh].iter_mut().zip(gi) {
                                    *dvc += pij * gc;
                                }
                            }
                            for j in 0..kv_seq {
                                let ds = prow[j] * (dp[j] - dot) * scale;
                                if ds == 0.0 {
                                    continue;
                                }
                                let ko = kcol(j);
                                for c in 0..dh {
                                    dq[qo + c] += ds * kd[ko + c];
                                    dk[ko + c] += ds * qd[qo + c];
                                }
                            }
                        }
                    }
                }
                for (var, buf, rows) in [(q, dq, q_rows), (k, dk, kv_rows), (v, dv, kv_rows)] {
                    if self.wants(var) {
                        let t = Tensor::new(vec![rows, d], buf.into_iter().map(S::from_f64).collect())?;
                        self.accumulate(grads, var, t);
                    }
                }
            }
            Op::Sum(a) => {
                let gv = gd[0];
                self.accumulate(grads, *a, Tensor::filled(self.shape(*a), gv));
            }
            Op::BceWithLogits { logits, labels } => {
                let gv = gd[0].to_f64();
                let dz = self
                    .data(*logits)
                    .iter()
                    .zip(labels)
                    .map(|(z, &y)| {
                        let y = if y == 0 { 0.0 } else { 1.0 };
                        S::from_f64(gv * (tensor::sigmoid(z.to_f64()) - y))
                    })
                    .collect();
                self.accumulate(grads, *logits, Tensor::new(self.shape(*logits).to_vec(), dz)?);
            }
        }
        Ok(())
    }
}
