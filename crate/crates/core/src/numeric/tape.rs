//! Define-by-run reverse-mode differentiation.
//!
//! A [`Tape`] records operations on rank-2 tensors as they execute and
//! replays them backwards. Parameters are read in place from a borrowed
//! [`ParamStore`], so many tapes can share one store across threads; each
//! tape's backward pass returns its own [`Gradients`] for the caller to sum.

use rand::Rng;

use super::params::{Gradients, ParamId, ParamStore};
use super::tensor::{self, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Constant,
    Input,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Tensor,
        inv_std: Vec<f64>,
    },
    MaskedSoftmax(Var),
    Rows {
        x: Var,
        idx: Vec<usize>,
    },
    Cols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    MeanRows(Var),
    Dropout {
        x: Var,
        mask: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        cols: Vec<Vec<usize>>,
        probs: Vec<Vec<f64>>,
    },
    BceLogits {
        z: Var,
        labels: Vec<f64>,
    },
    Sum(Var),
    Mean(Var),
}

#[derive(Debug)]
struct Node {
    value: Option<Tensor>,
    op: Op,
    needs_grad: bool,
}

pub struct Tape<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
}

/// Result of a backward pass.
#[derive(Debug)]
pub struct Backward {
    pub params: Gradients,
    grads: Vec<Option<Tensor>>,
}

impl Backward {
    /// Gradient reaching a node (e.g. an [`Tape::input`] leaf).
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Tensor> {
        self.grads[v.0].take()
    }
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self {
            params,
            nodes: Vec::new(),
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
        let node = &self.nodes[v.0];
        match node.op {
            Op::Param(id) => self.params.get(id),
            _ => node.value.as_ref().expect("non-parameter nodes hold values"),
        }
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Some(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Constant, false)
    }

    /// Leaf whose gradient is reported by [`Backward::grad`].
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Input, true)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).matmul(self.value(b));
        let ng = self.needs(a) || self.needs(b);
        self.push(out, Op::MatMul(a, b), ng)
    }

    /// `a · bᵀ`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).matmul_bt(self.value(b));
        let ng = self.needs(a) || self.needs(b);
        self.push(out, Op::MatMulBt(a, b), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        let ng = self.needs(a) || self.needs(b);
        self.push(out, Op::Add(a, b), ng)
    }

    /// Adds the `1 × n` row `bias` to every row of `x`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Var {
        let b = self.value(bias);
        assert_eq!(b.rows(), 1, "add_row bias must be a row vector");
        let mut out = self.value(x).clone();
        assert_eq!(out.cols(), b.cols(), "add_row width mismatch");
        let bias_row = b.data().to_vec();
        for r in 0..out.rows() {
            for (o, bv) in out.row_slice_mut(r).iter_mut().zip(&bias_row) {
                *o += bv;
            }
        }
        let ng = self.needs(x) || self.needs(bias);
        self.push(out, Op::AddRow(x, bias), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "mul shape mismatch");
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::new(va.shape().to_vec(), data).expect("same shape");
        let ng = self.needs(a) || self.needs(b);
        self.push(out, Op::Mul(a, b), ng)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let mut out = self.value(x).clone();
        out.scale_in_place(s);
        let ng = self.needs(x);
        self.push(out, Op::Scale(x, s), ng)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let data = v.data().iter().map(|&z| tensor::gelu(z)).collect();
        let out = Tensor::new(v.shape().to_vec(), data).expect("same shape");
        let ng = self.needs(x);
        self.push(out, Op::Gelu(x), ng)
    }

    /// Row-wise layer normalization with `1 × n` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let v = self.value(x);
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let (rows, cols) = (v.rows(), v.cols());
        assert_eq!(g.len(), cols, "layer_norm gain width");
        assert_eq!(b.len(), cols, "layer_norm bias width");
        let mut xhat = Tensor::zeros(&[rows, cols]);
        let mut out = Tensor::zeros(&[rows, cols]);
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let (h, is) = tensor::normalize(v.row_slice(r), eps);
            inv_std.push(is);
            for (j, hv) in h.iter().enumerate() {
                out.row_slice_mut(r)[j] = hv * g[j] + b[j];
            }
            xhat.row_slice_mut(r).copy_from_slice(&h);
        }
        let ng = self.needs(x) || self.needs(gamma) || self.needs(beta);
        self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            ng,
        )
    }

    /// Row-wise softmax over the entries where `visible` is true.
    ///
    /// Hidden entries are exactly zero; a row with no visible entry is all zeros.
    pub fn masked_softmax(&mut self, x: Var, visible: &[bool]) -> Var {
        let v = self.value(x);
        let (rows, cols) = (v.rows(), v.cols());
        assert_eq!(visible.len(), rows * cols, "mask shape mismatch");
        let mut out = Tensor::zeros(&[rows, cols]);
        for r in 0..rows {
            let row = v.row_slice(r);
            let vis = &visible[r * cols..(r + 1) * cols];
            let max = row
                .iter()
                .zip(vis)
                .filter(|(_, &m)| m)
                .map(|(s, _)| *s)
                .fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                continue;
            }
            let o = out.row_slice_mut(r);
            let mut sum = 0.0;
            for j in 0..cols {
                if vis[j] {
                    let e = (row[j] - max).exp();
                    o[j] = e;
                    sum += e;
                }
            }
            for j in 0..cols {
                if vis[j] {
                    o[j] /= sum;
                }
            }
        }
        let ng = self.needs(x);
        self.push(out, Op::MaskedSoftmax(x), ng)
    }

    /// Gathers rows of `x` (an embedding lookup when `x` is a table).
    pub fn rows(&mut self, x: Var, idx: &[usize]) -> Var {
        let v = self.value(x);
        let cols = v.cols();
        let mut data = Vec::with_capacity(idx.len() * cols);
        for &i in idx {
            assert!(i < v.rows(), "row index {i} out of range {}", v.rows());
            data.extend_from_slice(v.row_slice(i));
        }
        let out = Tensor::new(vec![idx.len(), cols], data).expect("gathered shape");
        let ng = self.needs(x);
        self.push(
            out,
            Op::Rows {
                x,
                idx: idx.to_vec(),
            },
            ng,
        )
    }

    /// Columns `start..start + width`.
    pub fn cols(&mut self, x: Var, start: usize, width: usize) -> Var {
        let v = self.value(x);
        assert!(start + width <= v.cols(), "column slice out of range");
        let mut data = Vec::with_capacity(v.rows() * width);
        for r in 0..v.rows() {
            data.extend_from_slice(&v.row_slice(r)[start..start + width]);
        }
        let out = Tensor::new(vec![v.rows(), width], data).expect("slice shape");
        let ng = self.needs(x);
        self.push(out, Op::Cols { x, start }, ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows();
        let width: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Tensor::zeros(&[rows, width]);
        let mut offset = 0;
        for &p in parts {
            let v = self.value(p);
            assert_eq!(v.rows(), rows, "concat_cols row mismatch");
            let w = v.cols();
            for r in 0..rows {
                out.row_slice_mut(r)[offset..offset + w].copy_from_slice(v.row_slice(r));
            }
            offset += w;
        }
        let ng = parts.iter().any(|&p| self.needs(p));
        self.push(out, Op::ConcatCols(parts.to_vec()), ng)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let v = self.value(p);
            assert_eq!(v.cols(), cols, "concat_rows width mismatch");
            data.extend_from_slice(v.data());
            rows += v.rows();
        }
        let out = Tensor::new(vec![rows, cols], data).expect("stacked shape");
        let ng = parts.iter().any(|&p| self.needs(p));
        self.push(out, Op::ConcatRows(parts.to_vec()), ng)
    }

    /// Average of the rows, as a `1 × n` row.
    pub fn mean_rows(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let (rows, cols) = (v.rows(), v.cols());
        let mut out = vec![0.0; cols];
        for r in 0..rows {
            for (o, x) in out.iter_mut().zip(v.row_slice(r)) {
                *o += x;
            }
        }
        out.iter_mut().for_each(|o| *o /= rows as f64);
        let ng = self.needs(x);
        self.push(Tensor::row(out), Op::MeanRows(x), ng)
    }

    /// Inverted dropout. A zero rate returns `x` unchanged.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, rate: f64, rng: &mut R) -> Var {
        if rate <= 0.0 {
            return x;
        }
        let keep = 1.0 - rate;
        let v = self.value(x);
        let mask: Vec<f64> = (0..v.len())
            .map(|_| {
                if rng.random::<f64>() < keep {
                    1.0 / keep
                } else {
                    0.0
                }
            })
            .collect();
        let data = v.data().iter().zip(&mask).map(|(a, m)| a * m).collect();
        let out = Tensor::new(v.shape().to_vec(), data).expect("same shape");
        let ng = self.needs(x);
        self.push(out, Op::Dropout { x, mask }, ng)
    }

    /// Per-row contrastive cross-entropy over a candidate subset of columns.
    ///
    /// Row `r` scores the candidates `cols[r]`, whose first entry is the
    /// positive: `loss_r = logsumexp(logits[r, cols[r]]) − logits[r, cols[r][0]]`.
    /// A column may be listed more than once; each listing counts. Returns `m × 1`.
    pub fn cross_entropy(&mut self, logits: Var, cols: Vec<Vec<usize>>) -> Var {
        let v = self.value(logits);
        assert_eq!(cols.len(), v.rows(), "one candidate list per row");
        let mut losses = Vec::with_capacity(cols.len());
        let mut probs = Vec::with_capacity(cols.len());
        for (r, cand) in cols.iter().enumerate() {
            assert!(!cand.is_empty(), "empty candidate list");
            let row = v.row_slice(r);
            let scores: Vec<f64> = cand.iter().map(|&c| row[c]).collect();
            let lse = tensor::logsumexp_unchecked(&scores);
            losses.push(lse - scores[0]);
            probs.push(scores.iter().map(|s| (s - lse).exp()).collect());
        }
        let out = Tensor::new(vec![losses.len(), 1], losses).expect("column");
        let ng = self.needs(logits);
        self.push(
            out,
            Op::CrossEntropy {
                logits,
                cols,
                probs,
            },
            ng,
        )
    }

    /// Binary logistic loss on logits `z` (`m × 1`): `softplus(z) − y·z`.
    pub fn bce_with_logits(&mut self, z: Var, labels: &[bool]) -> Var {
        let v = self.value(z);
        assert_eq!(v.len(), labels.len(), "one label per logit");
        let y: Vec<f64> = labels.iter().map(|&l| if l { 1.0 } else { 0.0 }).collect();
        let data = v
            .data()
            .iter()
            .zip(&y)
            .map(|(&zv, &yv)| tensor::softplus(zv) - yv * zv)
            .collect();
        let out = Tensor::new(vec![labels.len(), 1], data).expect("column");
        let ng = self.needs(z);
        self.push(out, Op::BceLogits { z, labels: y }, ng)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let ng = self.needs(x);
        self.push(Tensor::scalar(s), Op::Sum(x), ng)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.data().iter().sum::<f64>() / v.len() as f64;
        let ng = self.needs(x);
        self.push(Tensor::scalar(s), Op::Mean(x), ng)
    }

    /// Backpropagates from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Backward> {
        if self.value(loss).len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        Ok(self.backward_with(loss, Tensor::scalar(1.0)))
    }

    /// Backpropagates an upstream gradient `seed` shaped like `out`.
    pub fn backward_with(&self, out: Var, seed: Tensor) -> Backward {
        assert_eq!(
            seed.shape(),
            self.value(out).shape(),
            "seed must match output shape"
        );
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        let mut params = Gradients::empty(self.params);
        grads[out.0] = Some(seed);

        for i in (0..=out.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            match &node.op {
                Op::Constant => {}
                Op::Input => {
                    grads[i] = Some(g);
                }
                Op::Param(id) => params.accumulate(*id, g),
                Op::MatMul(a, b) => {
                    if self.needs(*a) {
                        let ga = g.matmul_bt(self.value(*b));
                        self.acc(&mut grads, *a, ga);
                    }
                    if self.needs(*b) {
                        let gb = self.value(*a).matmul_at(&g);
                        self.acc(&mut grads, *b, gb);
                    }
                }
                Op::MatMulBt(a, b) => {
                    if self.needs(*a) {
                        let ga = g.matmul(self.value(*b));
                        self.acc(&mut grads, *a, ga);
                    }
                    if self.needs(*b) {
                        let gb = g.matmul_at(self.value(*a));
                        self.acc(&mut grads, *b, gb);
                    }
                }
                Op::Add(a, b) => {
                    if self.needs(*b) {
                        self.acc(&mut grads, *b, g.clone());
                    }
                    if self.needs(*a) {
                        self.acc(&mut grads, *a, g);
                    }
                }
                Op::AddRow(x, bias) => {
                    if self.needs(*bias) {
                        let mut gb = vec![0.0; g.cols()];
                        for r in 0..g.rows() {
                            for (o, v) in gb.iter_mut().zip(g.row_slice(r)) {
                                *o += v;
                            }
                        }
                        self.acc(&mut grads, *bias, Tensor::row(gb));
                    }
                    if self.needs(*x) {
                        self.acc(&mut grads, *x, g);
                    }
                }
                Op::Mul(a, b) => {
                    if self.needs(*a) {
                        let ga = elementwise(&g, self.value(*b), |x, y| x * y);
                        self.acc(&mut grads, *a, ga);
                    }
                    if self.needs(*b) {
                        let gb = elementwise(&g, self.value(*a), |x, y| x * y);
                        self.acc(&mut grads, *b, gb);
                    }
                }
                Op::Scale(x, s) => {
                    let mut gx = g;
                    gx.scale_in_place(*s);
                    self.acc(&mut grads, *x, gx);
                }
                Op::Gelu(x) => {
                    let gx = elementwise(&g, self.value(*x), |gv, xv| gv * tensor::gelu_grad(xv));
                    self.acc(&mut grads, *x, gx);
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    let gam = self.value(*gamma).data();
                    let (rows, cols) = (g.rows(), g.cols());
                    let n = cols as f64;
                    let mut gx = Tensor::zeros(&[rows, cols]);
                    let mut gg = vec![0.0; cols];
                    let mut gbeta = vec![0.0; cols];
                    for r in 0..rows {
                        let dy = g.row_slice(r);
                        let h = xhat.row_slice(r);
                        let mut mean_d = 0.0;
                        let mut mean_dh = 0.0;
                        for j in 0..cols {
                            let d = dy[j] * gam[j];
                            mean_d += d;
                            mean_dh += d * h[j];
                            gg[j] += dy[j] * h[j];
                            gbeta[j] += dy[j];
                        }
                        mean_d /= n;
                        mean_dh /= n;
                        let out = gx.row_slice_mut(r);
                        for j in 0..cols {
                            let d = dy[j] * gam[j];
                            out[j] = inv_std[r] * (d - mean_d - h[j] * mean_dh);
                        }
                    }
                    if self.needs(*gamma) {
                        self.acc(&mut grads, *gamma, Tensor::row(gg));
                    }
                    if self.needs(*beta) {
                        self.acc(&mut grads, *beta, Tensor::row(gbeta));
                    }
                    if self.needs(*x) {
                        self.acc(&mut grads, *x, gx);
                    }
                }
                Op::MaskedSoftmax(x) => {
                    let p = node.value.as_ref().expect("softmax output");
                    let mut gx = Tensor::zeros(p.shape());
                    for r in 0..p.rows() {
                        let pr = p.row_slice(r);
                        let gr = g.row_slice(r);
                        let inner: f64 = pr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for (o, (pv, gv)) in gx.row_slice_mut(r).iter_mut().zip(pr.iter().zip(gr)) {
                            *o = pv * (gv - inner);
                        }
                    }
                    self.acc(&mut grads, *x, gx);
                }
                Op::Rows { x, idx } => {
                    let shape = self.value(*x).shape().to_vec();
                    let target = self.slot(&mut grads, &mut params, *x, &shape);
                    for (r, &src) in idx.iter().enumerate() {
                        for (t, v) in target.row_slice_mut(src).iter_mut().zip(g.row_slice(r)) {
                            *t += v;
                        }
                    }
                }
                Op::Cols { x, start } => {
                    let shape = self.value(*x).shape().to_vec();
                    let width = g.cols();
                    let target = self.slot(&mut grads, &mut params, *x, &shape);
                    for r in 0..g.rows() {
                        for (t, v) in target.row_slice_mut(r)[*start..*start + width]
                            .iter_mut()
                            .zip(g.row_slice(r))
                        {
                            *t += v;
                        }
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let w = self.value(p).cols();
                        if self.needs(p) {
                            let mut data = Vec::with_capacity(g.rows() * w);
                            for r in 0..g.rows() {
                                data.extend_from_slice(&g.row_slice(r)[offset..offset + w]);
                            }
                            let gp = Tensor::new(vec![g.rows(), w], data).expect("slice");
                            self.acc(&mut grads, p, gp);
                        }
                        offset += w;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let rows = self.value(p).rows();
                        if self.needs(p) {
                            let c = g.cols();
                            let data = g.data()[offset * c..(offset + rows) * c].to_vec();
                            let gp = Tensor::new(vec![rows, c], data).expect("slice");
                            self.acc(&mut grads, p, gp);
                        }
                        offset += rows;
                    }
                }
                Op::MeanRows(x) => {
                    let shape = self.value(*x).shape().to_vec();
                    let rows = shape[0] as f64;
                    let mut gx = Tensor::zeros(&shape);
                    for r in 0..shape[0] {
                        for (o, v) in gx.row_slice_mut(r).iter_mut().zip(g.data()) {
                            *o = v / rows;
                        }
                    }
                    self.acc(&mut grads, *x, gx);
                }
                Op::Dropout { x, mask } => {
                    let mut gx = g;
                    for (v, m) in gx.data_mut().iter_mut().zip(mask) {
                        *v *= m;
                    }
                    self.acc(&mut grads, *x, gx);
                }
                Op::CrossEntropy {
                    logits,
                    cols,
                    probs,
                } => {
                    let shape = self.value(*logits).shape().to_vec();
                    let target = self.slot(&mut grads, &mut params, *logits, &shape);
                    for (r, (cand, p)) in cols.iter().zip(probs).enumerate() {
                        let gr = g.data()[r];
                        let row = target.row_slice_mut(r);
                        for (&c, &pv) in cand.iter().zip(p) {
                            row[c] += gr * pv;
                        }
                        row[cand[0]] -= gr;
                    }
                }
                Op::BceLogits { z, labels } => {
                    let zv = self.value(*z);
                    let data = zv
                        .data()
                        .iter()
                        .zip(labels)
                        .zip(g.data())
                        .map(|((&zz, &y), &gv)| gv * (tensor::sigmoid(zz) - y))
                        .collect();
                    let gz = Tensor::new(zv.shape().to_vec(), data).expect("same shape");
                    self.acc(&mut grads, *z, gz);
                }
                Op::Sum(x) => {
                    let gx = Tensor::full(self.value(*x).shape(), g.item());
                    self.acc(&mut grads, *x, gx);
                }
                Op::Mean(x) => {
                    let v = self.value(*x);
                    let gx = Tensor::full(v.shape(), g.item() / v.len() as f64);
                    self.acc(&mut grads, *x, gx);
                }
            }
        }
        Backward { params, grads }
    }

    fn acc(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.needs(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    /// Accumulation target for `v`; parameters accumulate straight into `params`.
    fn slot<'g>(
        &self,
        grads: &'g mut [Option<Tensor>],
        params: &'g mut Gradients,
        v: Var,
        shape: &[usize],
    ) -> &'g mut Tensor {
        if let Op::Param(id) = self.nodes[v.0].op {
            return params.slot_mut(id, shape);
        }
        grads[v.0].get_or_insert_with(|| Tensor::zeros(shape))
    }
}

fn elementwise(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(x, y)| f(*x, *y)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("same shape")
}
