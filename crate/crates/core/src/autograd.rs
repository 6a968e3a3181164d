//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every operation appends a node whose parents already live on the tape, so
//! node order is a topological order and `backward` is a single reverse sweep.
//! Gradients accumulate into the nodes until [`Tape::zero_grad`] is called.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::{gemm_nn, gemm_nt, gemm_tn, Tensor};

const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Class-index or soft-distribution targets for [`Tape::cross_entropy`].
#[derive(Clone, Debug)]
pub enum Target {
    Indices(Vec<usize>),
    Distribution(Tensor),
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    /// `a * b^T`
    Linear(Var, Var),
    Bmm(Var, Var),
    /// Right operand broadcast over the leading axes of the left one.
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Narrow { src: Var, axis: usize },
    Exp(Var),
    Softmax(Var),
    LogSoftmax(Var),
    Gelu(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    Embedding { table: Var, ids: Vec<usize> },
    SumAll(Var),
    MeanAll(Var),
    /// Mean over one axis, which is removed from the shape.
    MeanAxis(Var, usize),
    CrossEntropy { logits: Var, target: Target, probs: Vec<f64> },
    KlDiv(Var, Var),
    Mse(Var, Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Tensor>,
}

/// Operation record for one forward/backward computation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    named: BTreeMap<String, Var>,
}

pub(crate) fn rows_of(shape: &[usize]) -> (usize, usize) {
    let last = *shape.last().unwrap_or(&1);
    let rows = shape.iter().product::<usize>().checked_div(last).unwrap_or(0);
    (rows, last)
}

fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    let inner = C * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * 0.044715 * x * x)
}

pub(crate) fn softmax_rows(data: &[f64], cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    for (src, dst) in data.chunks(cols).zip(out.chunks_mut(cols)) {
        let max = src.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (d, &s) in dst.iter_mut().zip(src) {
            *d = (s - max).exp();
            sum += *d;
        }
        for d in dst.iter_mut() {
            *d /= sum;
        }
    }
    out
}

pub(crate) fn log_softmax_rows(data: &[f64], cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    for (src, dst) in data.chunks(cols).zip(out.chunks_mut(cols)) {
        let max = src.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + src.iter().map(|s| (s - max).exp()).sum::<f64>().ln();
        for (d, &s) in dst.iter_mut().zip(src) {
            *d = s - lse;
        }
    }
    out
}

fn permute_data(data: &[f64], shape: &[usize], perm: &[usize]) -> (Vec<usize>, Vec<f64>) {
    let rank = shape.len();
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    // stride in the source for each output axis
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(data.len());
    let mut idx = vec![0usize; rank];
    for _ in 0..data.len() {
        let offset: usize = idx.iter().zip(&strides).map(|(i, s)| i * s).sum();
        out.push(data[offset]);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            if idx[ax] < out_shape[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    (out_shape, out)
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Registers a named leaf once; later calls with the same name return the
    /// same node so gradients from every use accumulate in one place.
    pub fn param(&mut self, name: &str, value: &Tensor, requires_grad: bool) -> Var {
        if let Some(&v) = self.named.get(name) {
            return v;
        }
        let v = self.leaf(value.clone(), requires_grad);
        self.named.insert(name.to_string(), v);
        v
    }

    pub fn named(&self, name: &str) -> Option<Var> {
        self.named.get(name).copied()
    }

    /// Copy of `v` with no connection to its history.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
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

    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    /// Accumulated gradients of every named leaf that requires grad.
    pub fn named_grads(&self) -> BTreeMap<String, Tensor> {
        self.named
            .iter()
            .filter(|(_, v)| self.nodes[v.0].requires_grad)
            .map(|(name, v)| {
                let g = self.nodes[v.0]
                    .grad
                    .clone()
                    .unwrap_or_else(|| Tensor::zeros(self.nodes[v.0].value.shape()));
                (name.clone(), g)
            })
            .collect()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    // ---- operations -------------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    /// `x * w^T` for `x: [m, k]`, `w: [n, k]`.
    pub fn linear(&mut self, x: Var, w: Var) -> Result<Var> {
        let (xs, ws) = (self.shape(x), self.shape(w));
        let (m, k, n) = match (xs, ws) {
            (&[m, k], &[n, k2]) if k == k2 => (m, k, n),
            _ => return Err(Error::shape("linear", xs, ws)),
        };
        let mut out = vec![0.0; m * n];
        gemm_nt(self.value(x).data(), self.value(w).data(), m, k, n, &mut out);
        let rg = self.needs(&[x, w]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::Linear(x, w), rg))
    }

    /// Batched product of `[b, m, k]` and `[b, k, n]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let (as_, bs) = (self.shape(a), self.shape(b));
        let (bt, m, k, n) = match (as_, bs) {
            (&[bt, m, k], &[bt2, k2, n]) if bt == bt2 && k == k2 => (bt, m, k, n),
            _ => return Err(Error::shape("bmm", as_, bs)),
        };
        let mut out = vec![0.0; bt * m * n];
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        for i in 0..bt {
            gemm_nn(
                &ad[i * m * k..(i + 1) * m * k],
                &bd[i * k * n..(i + 1) * k * n],
                m,
                k,
                n,
                &mut out[i * m * n..(i + 1) * m * n],
            );
        }
        let rg = self.needs(&[a, b]);
        Ok(self.push(Tensor::new(vec![bt, m, n], out)?, Op::Bmm(a, b), rg))
    }

    /// Elementwise sum; `b` may have a shape equal to a suffix of `a`'s shape.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (as_, bs) = (self.shape(a), self.shape(b));
        if bs.len() > as_.len() || as_[as_.len() - bs.len()..] != *bs {
            return Err(Error::shape("add", as_, bs));
        }
        let bd = self.value(b).data();
        let mut data = self.value(a).data().to_vec();
        if !bd.is_empty() {
            for chunk in data.chunks_mut(bd.len()) {
                for (x, y) in chunk.iter_mut().zip(bd) {
                    *x += y;
                }
            }
        }
        let value = Tensor::new(as_.to_vec(), data)?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).sub(self.value(b))?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(value, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::shape("mul", av.shape(), bv.shape()));
        }
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x * y).collect();
        let value = Tensor::new(av.shape().to_vec(), data)?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let value = self.value(a).scale(factor);
        let rg = self.needs(&[a]);
        self.push(value, Op::Scale(a, factor), rg)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).reshape(shape)?;
        let rg = self.needs(&[a]);
        Ok(self.push(value, Op::Reshape(a), rg))
    }

    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let src = self.value(a);
        let mut seen = vec![false; src.rank()];
        for &p in perm {
            if p >= src.rank() || std::mem::replace(&mut seen[p], true) {
                return Err(Error::shape("permute", src.shape(), perm));
            }
        }
        if perm.len() != src.rank() {
            return Err(Error::shape("permute", src.shape(), perm));
        }
        let (shape, data) = permute_data(src.data(), src.shape(), perm);
        let value = Tensor::new(shape, data)?;
        let rg = self.needs(&[a]);
        Ok(self.push(value, Op::Permute(a, perm.to_vec()), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        if self.shape(a).len() != 2 {
            return Err(Error::Contract(format!("transpose expects a matrix, got {:?}", self.shape(a))));
        }
        self.permute(a, &[1, 0])
    }

    /// Leading `len` entries along `axis`.
    pub fn narrow(&mut self, a: Var, axis: usize, len: usize) -> Result<Var> {
        if self.shape(a).get(axis) == Some(&len) {
            return Ok(a);
        }
        let value = self.value(a).narrow(axis, len)?;
        let rg = self.needs(&[a]);
        Ok(self.push(value, Op::Narrow { src: a, axis }, rg))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let src = self.value(a);
        let data = src.data().iter().map(|v| v.exp()).collect();
        let value = Tensor::new(src.shape().to_vec(), data).expect("same shape");
        let rg = self.needs(&[a]);
        self.push(value, Op::Exp(a), rg)
    }

    /// Softmax over the last axis, computed with max subtraction.
    pub fn softmax(&mut self, a: Var) -> Var {
        let src = self.value(a);
        let (_, cols) = rows_of(src.shape());
        let value = Tensor::new(src.shape().to_vec(), softmax_rows(src.data(), cols)).expect("same shape");
        let rg = self.needs(&[a]);
        self.push(value, Op::Softmax(a), rg)
    }

    pub fn log_softmax(&mut self, a: Var) -> Var {
        let src = self.value(a);
        let (_, cols) = rows_of(src.shape());
        let value = Tensor::new(src.shape().to_vec(), log_softmax_rows(src.data(), cols)).expect("same shape");
        let rg = self.needs(&[a]);
        self.push(value, Op::LogSoftmax(a), rg)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let src = self.value(a);
        let data = src.data().iter().map(|&v| gelu(v)).collect();
        let value = Tensor::new(src.shape().to_vec(), data).expect("same shape");
        let rg = self.needs(&[a]);
        self.push(value, Op::Gelu(a), rg)
    }

    /// Normalizes over the last axis, then applies per-feature gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let (rows, cols) = rows_of(&xs);
        for p in [gain, bias] {
            if self.shape(p) != [cols] {
                return Err(Error::shape("layer_norm", &xs, self.shape(p)));
            }
        }
        let xd = self.value(x).data();
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let mut out = vec![0.0; xd.len()];
        let mut xhat = vec![0.0; xd.len()];
        let mut rstd = vec![0.0; rows];
        for r in 0..rows {
            let row = &xd[r * cols..(r + 1) * cols];
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let rs = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            rstd[r] = rs;
            for c in 0..cols {
                let h = (row[c] - mean) * rs;
                xhat[r * cols + c] = h;
                out[r * cols + c] = h * g[c] + b[c];
            }
        }
        let value = Tensor::new(xs, out)?;
        let rg = self.needs(&[x, gain, bias]);
        Ok(self.push(value, Op::LayerNorm { x, gain, bias, xhat, rstd }, rg))
    }

    /// Rows of `table` selected by `ids`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        let (vocab, dim) = match t.shape() {
            &[v, d] => (v, d),
            s => return Err(Error::Contract(format!("embedding table must be a matrix, got {s:?}"))),
        };
        let mut out = Vec::with_capacity(ids.len() * dim);
        for &id in ids {
            if id >= vocab {
                return Err(Error::Index {
                    what: "token id",
                    index: id,
                    bound: vocab,
                });
            }
            out.extend_from_slice(&t.data()[id * dim..(id + 1) * dim]);
        }
        let value = Tensor::new(vec![ids.len(), dim], out)?;
        let rg = self.needs(&[table]);
        Ok(self.push(value, Op::Embedding { table, ids: ids.to_vec() }, rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        let rg = self.needs(&[a]);
        self.push(value, Op::SumAll(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let value = Tensor::scalar(t.sum() / t.numel().max(1) as f64);
        let rg = self.needs(&[a]);
        self.push(value, Op::MeanAll(a), rg)
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let t = self.value(a);
        let shape = t.shape();
        if axis >= shape.len() {
            return Err(Error::Index {
                what: "reduction axis",
                index: axis,
                bound: shape.len(),
            });
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let mut out = vec![0.0; outer * inner];
        let d = t.data();
        for o in 0..outer {
            for k in 0..len {
                let src = &d[(o * len + k) * inner..(o * len + k + 1) * inner];
                for (x, y) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *x += y;
                }
            }
        }
        for x in &mut out {
            *x /= len as f64;
        }
        let mut out_shape = shape.to_vec();
        out_shape.remove(axis);
        let value = Tensor::new(out_shape, out)?;
        let rg = self.needs(&[a]);
        Ok(self.push(value, Op::MeanAxis(a, axis), rg))
    }

    /// Mean over rows (all leading axes) of the cross-entropy against `target`.
    pub fn cross_entropy(&mut self, logits: Var, target: Target) -> Result<Var> {
        let z = self.value(logits);
        let (rows, cols) = rows_of(z.shape());
        let logp = log_softmax_rows(z.data(), cols);
        let mut total = 0.0;
        match &target {
            Target::Indices(idx) => {
                if idx.len() != rows {
                    return Err(Error::shape("cross_entropy", z.shape(), &[idx.len()]));
                }
                for (r, &t) in idx.iter().enumerate() {
                    if t >= cols {
                        return Err(Error::Index {
                            what: "class index",
                            index: t,
                            bound: cols,
                        });
                    }
                    total -= logp[r * cols + t];
                }
            }
            Target::Distribution(q) => {
                if q.shape() != z.shape() {
                    return Err(Error::shape("cross_entropy", z.shape(), q.shape()));
                }
                for (row_q, row_l) in q.data().chunks(cols).zip(logp.chunks(cols)) {
                    let s: f64 = row_q.iter().sum();
                    if (s - 1.0).abs() > 1e-9 || row_q.iter().any(|&v| v < 0.0) {
                        return Err(Error::Contract("target distribution must be a probability vector".into()));
                    }
                    total -= row_q.iter().zip(row_l).map(|(q, l)| if *q == 0.0 { 0.0 } else { q * l }).sum::<f64>();
                }
            }
        }
        let value = Tensor::scalar(total / rows.max(1) as f64);
        let probs = logp.iter().map(|l| l.exp()).collect();
        let rg = self.needs(&[logits]);
        Ok(self.push(value, Op::CrossEntropy { logits, target, probs }, rg))
    }

    /// `sum p ln(p/q)` over the last axis, averaged over rows; `0 ln 0 = 0`.
    pub fn kl_divergence(&mut self, p: Var, q: Var) -> Result<Var> {
        let (pv, qv) = (self.value(p), self.value(q));
        if pv.shape() != qv.shape() {
            return Err(Error::shape("kl_divergence", pv.shape(), qv.shape()));
        }
        let (rows, _) = rows_of(pv.shape());
        let mut total = 0.0;
        for (i, (&a, &b)) in pv.data().iter().zip(qv.data()).enumerate() {
            if a > 0.0 {
                if b <= 0.0 {
                    return Err(Error::InfiniteDivergence(i));
                }
                total += a * (a / b).ln();
            }
        }
        let value = Tensor::scalar(total / rows.max(1) as f64);
        let rg = self.needs(&[p, q]);
        Ok(self.push(value, Op::KlDiv(p, q), rg))
    }

    /// Mean squared elementwise difference.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::shape("mse", av.shape(), bv.shape()));
        }
        let n = av.numel().max(1) as f64;
        let s: f64 = av.data().iter().zip(bv.data()).map(|(x, y)| (x - y) * (x - y)).sum();
        let value = Tensor::scalar(s / n);
        let rg = self.needs(&[a, b]);
        Ok(self.push(value, Op::Mse(a, b), rg))
    }

    // ---- reverse sweep ----------------------------------------------------

    /// Accumulates d(loss)/d(node) into every node on which `loss` depends
    /// and that requires grad.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let shape = self.shape(loss);
        if !shape.is_empty() {
            return Err(Error::Contract(format!("backward needs a scalar loss, got shape {shape:?}")));
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        let mut grads: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.propagate(i, &g, &mut grads)?;
            let node = &mut self.nodes[i];
            match &mut node.grad {
                Some(acc) => acc.add_scaled_assign(&g, 1.0)?,
                None => node.grad = Some(g),
            }
        }
        Ok(())
    }

    fn send(&self, grads: &mut [Option<Tensor>], to: Var, g: Tensor) {
        if !self.nodes[to.0].requires_grad {
            return;
        }
        match &mut grads[to.0] {
            Some(acc) => {
                for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a += b;
                }
            }
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[i];
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k) = (av.shape()[0], av.shape()[1]);
                let n = bv.shape()[1];
                if self.requires_grad(*a) {
                    let mut da = vec![0.0; m * k];
                    gemm_nt(gd, bv.data(), m, n, k, &mut da);
                    self.send(grads, *a, Tensor::new(vec![m, k], da)?);
                }
                if self.requires_grad(*b) {
                    let mut db = vec![0.0; k * n];
                    gemm_tn(av.data(), gd, k, m, n, &mut db);
                    self.send(grads, *b, Tensor::new(vec![k, n], db)?);
                }
            }
            Op::Linear(x, w) => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (m, k) = (xv.shape()[0], xv.shape()[1]);
                let n = wv.shape()[0];
                if self.requires_grad(*x) {
                    let mut dx = vec![0.0; m * k];
                    gemm_nn(gd, wv.data(), m, n, k, &mut dx);
                    self.send(grads, *x, Tensor::new(vec![m, k], dx)?);
                }
                if self.requires_grad(*w) {
                    let mut dw = vec![0.0; n * k];
                    gemm_tn(gd, xv.data(), n, m, k, &mut dw);
                    self.send(grads, *w, Tensor::new(vec![n, k], dw)?);
                }
            }
            Op::Bmm(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (bt, m, k) = (av.shape()[0], av.shape()[1], av.shape()[2]);
                let n = bv.shape()[2];
                if self.requires_grad(*a) {
                    let mut da = vec![0.0; bt * m * k];
                    for t in 0..bt {
                        gemm_nt(
                            &gd[t * m * n..(t + 1) * m * n],
                            &bv.data()[t * k * n..(t + 1) * k * n],
                            m,
                            n,
                            k,
                            &mut da[t * m * k..(t + 1) * m * k],
                        );
                    }
                    self.send(grads, *a, Tensor::new(vec![bt, m, k], da)?);
                }
                if self.requires_grad(*b) {
                    let mut db = vec![0.0; bt * k * n];
                    for t in 0..bt {
                        gemm_tn(
                            &av.data()[t * m * k..(t + 1) * m * k],
                            &gd[t * m * n..(t + 1) * m * n],
                            k,
                            m,
                            n,
                            &mut db[t * k * n..(t + 1) * k * n],
                        );
                    }
                    self.send(grads, *b, Tensor::new(vec![bt, k, n], db)?);
                }
            }
            Op::Add(a, b) => {
                if self.requires_grad(*a) {
                    self.send(grads, *a, g.clone());
                }
                if self.requires_grad(*b) {
                    let bshape = self.shape(*b).to_vec();
                    let n = bshape.iter().product::<usize>();
                    let mut db = vec![0.0; n];
                    if n > 0 {
                        for chunk in gd.chunks(n) {
                            for (x, y) in db.iter_mut().zip(chunk) {
                                *x += y;
                            }
                        }
                    }
                    self.send(grads, *b, Tensor::new(bshape, db)?);
                }
            }
            Op::Sub(a, b) => {
                if self.requires_grad(*a) {
                    self.send(grads, *a, g.clone());
                }
                if self.requires_grad(*b) {
                    self.send(grads, *b, g.scale(-1.0));
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.requires_grad(*a) {
                    let d = gd.iter().zip(bv.data()).map(|(x, y)| x * y).collect();
                    self.send(grads, *a, Tensor::new(av.shape().to_vec(), d)?);
                }
                if self.requires_grad(*b) {
                    let d = gd.iter().zip(av.data()).map(|(x, y)| x * y).collect();
                    self.send(grads, *b, Tensor::new(bv.shape().to_vec(), d)?);
                }
            }
            Op::Scale(a, f) => self.send(grads, *a, g.scale(*f)),
            Op::Reshape(a) => self.send(grads, *a, g.reshape(self.shape(*a))?),
            Op::Permute(a, perm) => {
                let mut inverse = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inverse[p] = i;
                }
                let (shape, data) = permute_data(gd, g.shape(), &inverse);
                self.send(grads, *a, Tensor::new(shape, data)?);
            }
            Op::Narrow { src, axis } => {
                let full_shape = self.shape(*src).to_vec();
                let outer: usize = full_shape[..*axis].iter().product();
                let inner: usize = full_shape[axis + 1..].iter().product();
                let full = full_shape[*axis];
                let len = g.shape()[*axis];
                let mut d = vec![0.0; full_shape.iter().product()];
                for o in 0..outer {
                    let dst = o * full * inner;
                    let s = o * len * inner;
                    d[dst..dst + len * inner].copy_from_slice(&gd[s..s + len * inner]);
                }
                self.send(grads, *src, Tensor::new(full_shape, d)?);
            }
            Op::Exp(a) => {
                let d = gd.iter().zip(node.value.data()).map(|(x, y)| x * y).collect();
                self.send(grads, *a, Tensor::new(g.shape().to_vec(), d)?);
            }
            Op::Softmax(a) => {
                let (_, cols) = rows_of(g.shape());
                let y = node.value.data();
                let mut d = vec![0.0; y.len()];
                for ((dr, yr), gr) in d.chunks_mut(cols).zip(y.chunks(cols)).zip(gd.chunks(cols)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for ((o, &yv), &gv) in dr.iter_mut().zip(yr).zip(gr) {
                        *o = yv * (gv - dot);
                    }
                }
                self.send(grads, *a, Tensor::new(g.shape().to_vec(), d)?);
            }
            Op::LogSoftmax(a) => {
                let (_, cols) = rows_of(g.shape());
                let y = node.value.data();
                let mut d = vec![0.0; y.len()];
                for ((dr, yr), gr) in d.chunks_mut(cols).zip(y.chunks(cols)).zip(gd.chunks(cols)) {
                    let s: f64 = gr.iter().sum();
                    for ((o, &l), &gv) in dr.iter_mut().zip(yr).zip(gr) {
                        *o = gv - l.exp() * s;
                    }
                }
                self.send(grads, *a, Tensor::new(g.shape().to_vec(), d)?);
            }
            Op::Gelu(a) => {
                let x = self.value(*a).data();
                let d = gd.iter().zip(x).map(|(gv, &xv)| gv * gelu_grad(xv)).collect();
                self.send(grads, *a, Tensor::new(g.shape().to_vec(), d)?);
            }
            Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                let (rows, cols) = rows_of(g.shape());
                let gain_v = self.value(*gain).data();
                if self.requires_grad(*x) {
                    let mut dx = vec![0.0; rows * cols];
                    for r in 0..rows {
                        let gr = &gd[r * cols..(r + 1) * cols];
                        let hr = &xhat[r * cols..(r + 1) * cols];
                        let mut sum_dh = 0.0;
                        let mut sum_dh_h = 0.0;
                        for c in 0..cols {
                            let dh = gr[c] * gain_v[c];
                            sum_dh += dh;
                            sum_dh_h += dh * hr[c];
                        }
                        let n = cols as f64;
                        for c in 0..cols {
                            let dh = gr[c] * gain_v[c];
                            dx[r * cols + c] = rstd[r] / n * (n * dh - sum_dh - hr[c] * sum_dh_h);
                        }
                    }
                    self.send(grads, *x, Tensor::new(g.shape().to_vec(), dx)?);
                }
                if self.requires_grad(*gain) {
                    let mut dg = vec![0.0; cols];
                    for r in 0..rows {
                        for c in 0..cols {
                            dg[c] += gd[r * cols + c] * xhat[r * cols + c];
                        }
                    }
                    self.send(grads, *gain, Tensor::new(vec![cols], dg)?);
                }
                if self.requires_grad(*bias) {
                    let mut db = vec![0.0; cols];
                    for r in 0..rows {
                        for c in 0..cols {
                            db[c] += gd[r * cols + c];
                        }
                    }
                    self.send(grads, *bias, Tensor::new(vec![cols], db)?);
                }
            }
            Op::Embedding { table, ids } => {
                let tshape = self.shape(*table).to_vec();
                let dim = tshape[1];
                let mut d = vec![0.0; tshape[0] * dim];
                for (r, &id) in ids.iter().enumerate() {
                    for c in 0..dim {
                        d[id * dim + c] += gd[r * dim + c];
                    }
                }
                self.send(grads, *table, Tensor::new(tshape, d)?);
            }
            Op::SumAll(a) => {
                let shape = self.shape(*a);
                self.send(grads, *a, Tensor::full(shape, gd[0]));
            }
            Op::MeanAll(a) => {
                let shape = self.shape(*a);
                let n = shape.iter().product::<usize>().max(1) as f64;
                self.send(grads, *a, Tensor::full(shape, gd[0] / n));
            }
            Op::MeanAxis(a, axis) => {
                let shape = self.shape(*a).to_vec();
                let outer: usize = shape[..*axis].iter().product();
                let len = shape[*axis];
                let inner: usize = shape[axis + 1..].iter().product();
                let mut d = vec![0.0; shape.iter().product()];
                for o in 0..outer {
                    for k in 0..len {
                        for j in 0..inner {
                            d[(o * len + k) * inner + j] = gd[o * inner + j] / len as f64;
                        }
                    }
                }
                self.send(grads, *a, Tensor::new(shape, d)?);
            }
            Op::CrossEntropy { logits, target, probs } => {
                let shape = self.shape(*logits).to_vec();
                let (rows, cols) = rows_of(&shape);
                let scale = gd[0] / rows.max(1) as f64;
                let mut d = probs.clone();
                match target {
                    Target::Indices(idx) => {
                        for (r, &t) in idx.iter().enumerate() {
                            d[r * cols + t] -= 1.0;
                        }
                    }
                    Target::Distribution(q) => {
                        for (x, qv) in d.iter_mut().zip(q.data()) {
                            *x -= qv;
                        }
                    }
                }
                for x in &mut d {
                    *x *= scale;
                }
                self.send(grads, *logits, Tensor::new(shape, d)?);
            }
            Op::KlDiv(p, q) => {
                let (pv, qv) = (self.value(*p), self.value(*q));
                let (rows, _) = rows_of(pv.shape());
                let scale = gd[0] / rows.max(1) as f64;
                if self.requires_grad(*p) {
                    let d = pv
                        .data()
                        .iter()
                        .zip(qv.data())
                        .map(|(&a, &b)| if a > 0.0 { scale * ((a / b).ln() + 1.0) } else { 0.0 })
                        .collect();
                    self.send(grads, *p, Tensor::new(pv.shape().to_vec(), d)?);
                }
                if self.requires_grad(*q) {
                    let d = pv
                        .data()
                        .iter()
                        .zip(qv.data())
                        .map(|(&a, &b)| if a > 0.0 { -scale * a / b } else { 0.0 })
                        .collect();
                    self.send(grads, *q, Tensor::new(qv.shape().to_vec(), d)?);
                }
            }
            Op::Mse(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let f = 2.0 * gd[0] / av.numel().max(1) as f64;
                let diff: Vec<f64> = av.data().iter().zip(bv.data()).map(|(x, y)| f * (x - y)).collect();
                if self.requires_grad(*b) {
                    let neg = diff.iter().map(|v| -v).collect();
                    self.send(grads, *b, Tensor::new(bv.shape().to_vec(), neg)?);
                }
                if self.requires_grad(*a) {
                    self.send(grads, *a, Tensor::new(av.shape().to_vec(), diff)?);
                }
            }
        }
        Ok(())
    }
}
