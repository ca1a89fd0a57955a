//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every operation applied during one forward pass.
//! [`Graph::backward`] walks the tape in reverse and accumulates gradients
//! for every node and every parameter leaf.

use std::collections::HashMap;

use crate::params::{ParamId, ParamStore};
use crate::tensor::{axis_index, gemm, gemm_nt, gemm_tn, Axis, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Batch-norm behaviour for a forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Squared distances below this are clamped before the square root.
pub const DIST_FLOOR: f64 = 1e-12;

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMulShared { x: Var, w: Var },
    Bmm { a: Var, b: Var, trans_b: bool },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { a: Var, s: f64 },
    Gelu { a: Var },
    Relu { a: Var },
    Softmax { a: Var },
    LogSoftmax { a: Var },
    /// Normalize each row over its columns; `inv_std` per row.
    RowNorm { a: Var, inv_std: Vec<f64> },
    /// Normalize each column over all `batch*rows` rows; `inv_std` per column.
    ColNorm { a: Var, inv_std: Vec<f64> },
    Concat { parts: Vec<Var>, axis: Axis },
    Slice { a: Var, axis: Axis, start: usize },
    Reshape { a: Var },
    BroadcastBatch { a: Var },
    RepeatCols { a: Var, times: usize },
    MeanRows { a: Var },
    MaxRows { a: Var, argmax: Vec<usize> },
    Gem { a: Var, p: Var, eps: f64 },
    SumAll { a: Var },
    MeanAll { a: Var },
    PairDist { a: Var, pairs: Vec<(usize, usize)> },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients {
    nodes: Vec<Option<Tensor>>,
    params: HashMap<ParamId, Tensor>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].as_ref()
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.get(&id)
    }

    pub fn params(&self) -> &HashMap<ParamId, Tensor> {
        &self.params
    }
}

pub struct Graph<'s> {
    store: &'s ParamStore,
    nodes: Vec<Node>,
    param_vars: HashMap<ParamId, Var>,
    mode: Mode,
    buffer_updates: Vec<(ParamId, Tensor)>,
}

impl<'s> Graph<'s> {
    pub fn new(store: &'s ParamStore, mode: Mode) -> Self {
        Graph {
            store,
            nodes: Vec::new(),
            param_vars: HashMap::new(),
            mode,
            buffer_updates: Vec::new(),
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
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

    pub fn shape(&self, v: Var) -> [usize; 3] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Queue a buffer overwrite (running statistics) to be applied by the
    /// caller after the step.
    pub fn record_buffer_update(&mut self, id: ParamId, value: Tensor) {
        self.buffer_updates.push((id, value));
    }

    pub fn take_buffer_updates(&mut self) -> Vec<(ParamId, Tensor)> {
        std::mem::take(&mut self.buffer_updates)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    /// Leaf bound to a stored parameter. Repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let v = self.push(self.store.value(id).clone(), Op::Param(id));
        self.param_vars.insert(id, v);
        v
    }

    /// `x: [b, r, k]` times `w: [1, k, n]`.
    pub fn matmul(&mut self, x: Var, w: Var) -> Var {
        let out = self.value(x).matmul_shared(self.value(w));
        self.push(out, Op::MatMulShared { x, w })
    }

    /// Batched product `a[i] * b[i]` (or `a[i] * b[i]^T` when `trans_b`).
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        let [nb, m, k] = av.shape();
        assert_eq!(bv.batch(), nb, "bmm batch mismatch");
        let n = if trans_b {
            assert_eq!(bv.cols(), k);
            bv.rows()
        } else {
            assert_eq!(bv.rows(), k);
            bv.cols()
        };
        let mut out = vec![0.0; nb * m * n];
        let bsz = bv.rows() * bv.cols();
        for i in 0..nb {
            let ai = &av.data()[i * m * k..(i + 1) * m * k];
            let bi = &bv.data()[i * bsz..(i + 1) * bsz];
            let oi = &mut out[i * m * n..(i + 1) * m * n];
            if trans_b {
                gemm_nt(ai, bi, m, k, n, oi);
            } else {
                gemm(ai, bi, m, k, n, oi);
            }
        }
        self.push(Tensor::from_vec([nb, m, n], out), Op::Bmm { a, b, trans_b })
    }

    /// Elementwise sum; `b` broadcasts over any axis where its extent is 1.
    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = broadcast_zip(self.value(a), self.value(b), |x, y| x + y);
        self.push(out, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let nb = self.scale(b, -1.0);
        self.add(a, nb)
    }

    /// Elementwise product with the same broadcasting rule as [`add`](Self::add).
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = broadcast_zip(self.value(a), self.value(b), |x, y| x * y);
        self.push(out, Op::Mul { a, b })
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|x| x * s);
        self.push(out, Op::Scale { a, s })
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let c = self.constant(Tensor::scalar(s));
        self.add(a, c)
    }

    /// Exact GELU, `x * Phi(x)`.
    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(gelu);
        self.push(out, Op::Gelu { a })
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.max(0.0));
        self.push(out, Op::Relu { a })
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let c = v.cols();
        let mut out = v.clone();
        for row in out.data_mut().chunks_mut(c) {
            softmax_in_place(row);
        }
        self.push(out, Op::Softmax { a })
    }

    pub fn log_softmax(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let c = v.cols();
        let mut out = v.clone();
        for row in out.data_mut().chunks_mut(c) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            for x in row.iter_mut() {
                *x -= lse;
            }
        }
        self.push(out, Op::LogSoftmax { a })
    }

    /// Zero-mean, unit-variance normalization of each row (no affine).
    pub fn row_normalize(&mut self, a: Var, eps: f64) -> Var {
        let v = self.value(a);
        let c = v.cols();
        let mut out = v.clone();
        let mut inv_std = Vec::with_capacity(v.batch() * v.rows());
        for row in out.data_mut().chunks_mut(c) {
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / c as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for x in row.iter_mut() {
                *x = (*x - mean) * inv;
            }
            inv_std.push(inv);
        }
        self.push(out, Op::RowNorm { a, inv_std })
    }

    /// Normalize each column across all rows (training-mode batch norm
    /// without affine). Returns the output plus the batch mean and biased
    /// variance per column.
    pub fn col_normalize(&mut self, a: Var, eps: f64) -> (Var, Vec<f64>, Vec<f64>) {
        let v = self.value(a);
        let c = v.cols();
        let n = v.batch() * v.rows();
        let mut mean = vec![0.0; c];
        for row in v.data().chunks(c) {
            for (m, x) in mean.iter_mut().zip(row) {
                *m += x;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut var = vec![0.0; c];
        for row in v.data().chunks(c) {
            for ((s, x), m) in var.iter_mut().zip(row).zip(&mean) {
                *s += (x - m) * (x - m);
            }
        }
        var.iter_mut().for_each(|s| *s /= n as f64);
        let inv_std: Vec<f64> = var.iter().map(|s| 1.0 / (s + eps).sqrt()).collect();
        let mut out = v.clone();
        for row in out.data_mut().chunks_mut(c) {
            for ((x, m), inv) in row.iter_mut().zip(&mean).zip(&inv_std) {
                *x = (*x - m) * inv;
            }
        }
        let var_out = self.push(out, Op::ColNorm { a, inv_std });
        (var_out, mean, var)
    }

    pub fn concat(&mut self, parts: &[Var], axis: Axis) -> Var {
        let tensors: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let out = Tensor::concat(&tensors, axis);
        self.push(
            out,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
        )
    }

    pub fn slice(&mut self, a: Var, axis: Axis, start: usize, len: usize) -> Var {
        let out = self.value(a).slice(axis, start, len);
        self.push(out, Op::Slice { a, axis, start })
    }

    pub fn reshape(&mut self, a: Var, shape: [usize; 3]) -> Var {
        let out = self.value(a).clone().reshape(shape);
        self.push(out, Op::Reshape { a })
    }

    /// `[1, r, c]` to `[n, r, c]` by repetition.
    pub fn broadcast_batch(&mut self, a: Var, n: usize) -> Var {
        let v = self.value(a);
        assert_eq!(v.batch(), 1);
        let mut data = Vec::with_capacity(n * v.len());
        for _ in 0..n {
            data.extend_from_slice(v.data());
        }
        let out = Tensor::from_vec([n, v.rows(), v.cols()], data);
        self.push(out, Op::BroadcastBatch { a })
    }

    /// Repeat each column `times` times in place: `[.., h]` to `[.., h*times]`.
    pub fn repeat_cols(&mut self, a: Var, times: usize) -> Var {
        let v = self.value(a);
        let [b, r, c] = v.shape();
        let mut data = Vec::with_capacity(v.len() * times);
        for &x in v.data() {
            data.extend(std::iter::repeat_n(x, times));
        }
        let out = Tensor::from_vec([b, r, c * times], data);
        self.push(out, Op::RepeatCols { a, times })
    }

    /// Mean over rows: `[b, r, c]` to `[b, 1, c]`.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let [b, r, c] = v.shape();
        let mut out = Tensor::zeros([b, 1, c]);
        for bi in 0..b {
            for ri in 0..r {
                for (ci, x) in v.row(bi, ri).iter().enumerate() {
                    out.data_mut()[bi * c + ci] += x / r as f64;
                }
            }
        }
        self.push(out, Op::MeanRows { a })
    }

    /// Max over rows with first-index tie breaking.
    pub fn max_rows(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let [b, r, c] = v.shape();
        let mut out = Tensor::full([b, 1, c], f64::NEG_INFINITY);
        let mut argmax = vec![0; b * c];
        for bi in 0..b {
            for ri in 0..r {
                for (ci, &x) in v.row(bi, ri).iter().enumerate() {
                    let o = &mut out.data_mut()[bi * c + ci];
                    if x > *o {
                        *o = x;
                        argmax[bi * c + ci] = ri;
                    }
                }
            }
        }
        self.push(out, Op::MaxRows { a, argmax })
    }

    /// Generalized-mean pooling over rows with a learnable exponent `p`
    /// (a `[1,1,1]` var). Inputs are clamped to `>= eps` first.
    pub fn gem_rows(&mut self, a: Var, p: Var, eps: f64) -> Var {
        let v = self.value(a);
        let pv = self.value(p).data()[0];
        let [b, r, c] = v.shape();
        let mut out = Tensor::zeros([b, 1, c]);
        for bi in 0..b {
            for ci in 0..c {
                let m = (0..r).map(|ri| v.get(bi, ri, ci).max(eps).powf(pv)).sum::<f64>() / r as f64;
                out.data_mut()[bi * c + ci] = m.powf(1.0 / pv);
            }
        }
        self.push(out, Op::Gem { a, p, eps })
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        self.push(Tensor::scalar(s), Op::SumAll { a })
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let m = v.sum() / v.len() as f64;
        self.push(Tensor::scalar(m), Op::MeanAll { a })
    }

    /// Euclidean distances between row pairs of `a: [1, n, d]`;
    /// output `[1, pairs.len(), 1]`.
    pub fn pair_dist(&mut self, a: Var, pairs: Vec<(usize, usize)>) -> Var {
        let v = self.value(a);
        assert_eq!(v.batch(), 1);
        let data: Vec<f64> = pairs
            .iter()
            .map(|&(i, j)| {
                let d2: f64 = v
                    .row(0, i)
                    .iter()
                    .zip(v.row(0, j))
                    .map(|(x, y)| (x - y) * (x - y))
                    .sum();
                d2.max(DIST_FLOOR).sqrt()
            })
            .collect();
        let out = Tensor::from_vec([1, pairs.len(), 1], data);
        self.push(out, Op::PairDist { a, pairs })
    }

    /// Reverse pass from a scalar `[1,1,1]` output.
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(self.value(root).len(), 1, "backward needs a scalar root");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(self.value(root).shape(), 1.0));
        let mut params = HashMap::new();
        for idx in (0..=root.0).rev() {
            let Some(dy) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(dy);
                    continue;
                }
                Op::Param(id) => {
                    params.insert(*id, dy.clone());
                    grads[idx] = Some(dy);
                    continue;
                }
                _ => {}
            }
            match &node.op {
                Op::Leaf | Op::Param(_) => unreachable!(),
                Op::MatMulShared { x, w } => {
                    let (xv, wv) = (self.value(*x), self.value(*w));
                    let m = xv.batch() * xv.rows();
                    let (k, n) = (wv.rows(), wv.cols());
                    let mut dx = vec![0.0; m * k];
                    gemm_nt(dy.data(), wv.data(), m, n, k, &mut dx);
                    accumulate(&mut grads, *x, Tensor::from_vec(xv.shape(), dx));
                    let mut dw = vec![0.0; k * n];
                    gemm_tn(xv.data(), dy.data(), m, k, n, &mut dw);
                    accumulate(&mut grads, *w, Tensor::from_vec(wv.shape(), dw));
                }
                Op::Bmm { a, b, trans_b } => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let [nb, m, k] = av.shape();
                    let n = dy.cols();
                    let bsz = bv.rows() * bv.cols();
                    let mut da = vec![0.0; av.len()];
                    let mut db = vec![0.0; bv.len()];
                    for i in 0..nb {
                        let ai = &av.data()[i * m * k..(i + 1) * m * k];
                        let bi = &bv.data()[i * bsz..(i + 1) * bsz];
                        let gi = &dy.data()[i * m * n..(i + 1) * m * n];
                        let dai = &mut da[i * m * k..(i + 1) * m * k];
                        let dbi = &mut db[i * bsz..(i + 1) * bsz];
                        if *trans_b {
                            // y = a b^T, b: n x k
                            gemm(gi, bi, m, n, k, dai);
                            gemm_tn(gi, ai, m, n, k, dbi);
                        } else {
                            // y = a b, b: k x n
                            gemm_nt(gi, bi, m, n, k, dai);
                            gemm_tn(ai, gi, m, k, n, dbi);
                        }
                    }
                    accumulate(&mut grads, *a, Tensor::from_vec(av.shape(), da));
                    accumulate(&mut grads, *b, Tensor::from_vec(bv.shape(), db));
                }
                Op::Add { a, b } => {
                    let bshape = self.shape(*b);
                    accumulate(&mut grads, *b, reduce_to(&dy, bshape));
                    accumulate(&mut grads, *a, dy);
                }
                Op::Mul { a, b } => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let da = broadcast_zip(&dy, bv, |g, y| g * y);
                    let prod = zip_map(&dy, av, |g, x| g * x);
                    accumulate(&mut grads, *b, reduce_to(&prod, bv.shape()));
                    accumulate(&mut grads, *a, da);
                }
                Op::Scale { a, s } => {
                    let s = *s;
                    accumulate(&mut grads, *a, dy.map(|g| g * s));
                }
                Op::Gelu { a } => {
                    let x = self.value(*a);
                    let d = zip_map(&dy, x, |g, x| g * gelu_grad(x));
                    accumulate(&mut grads, *a, d);
                }
                Op::Relu { a } => {
                    let x = self.value(*a);
                    let d = zip_map(&dy, x, |g, x| if x > 0.0 { g } else { 0.0 });
                    accumulate(&mut grads, *a, d);
                }
                Op::Softmax { a } => {
                    let y = &node.value;
                    let c = y.cols();
                    let mut d = dy.clone();
                    for (drow, yrow) in d.data_mut().chunks_mut(c).zip(y.data().chunks(c)) {
                        let dot: f64 = drow.iter().zip(yrow).map(|(g, y)| g * y).sum();
                        for (g, y) in drow.iter_mut().zip(yrow) {
                            *g = y * (*g - dot);
                        }
                    }
                    accumulate(&mut grads, *a, d);
                }
                Op::LogSoftmax { a } => {
                    let y = &node.value;
                    let c = y.cols();
                    let mut d = dy.clone();
                    for (drow, yrow) in d.data_mut().chunks_mut(c).zip(y.data().chunks(c)) {
                        let s: f64 = drow.iter().sum();
                        for (g, ly) in drow.iter_mut().zip(yrow) {
                            *g -= ly.exp() * s;
                        }
                    }
                    accumulate(&mut grads, *a, d);
                }
                Op::RowNorm { a, inv_std } => {
                    let xhat = &node.value;
                    let c = xhat.cols();
                    let mut d = dy.clone();
                    for ((drow, xrow), inv) in d
                        .data_mut()
                        .chunks_mut(c)
                        .zip(xhat.data().chunks(c))
                        .zip(inv_std)
                    {
                        let sg: f64 = drow.iter().sum();
                        let sgx: f64 = drow.iter().zip(xrow).map(|(g, x)| g * x).sum();
                        let n = c as f64;
                        for (g, x) in drow.iter_mut().zip(xrow) {
                            *g = inv / n * (n * *g - sg - x * sgx);
                        }
                    }
                    accumulate(&mut grads, *a, d);
                }
                Op::ColNorm { a, inv_std } => {
                    let xhat = &node.value;
                    let c = xhat.cols();
                    let n = (xhat.len() / c) as f64;
                    let mut sg = vec![0.0; c];
                    let mut sgx = vec![0.0; c];
                    for (grow, xrow) in dy.data().chunks(c).zip(xhat.data().chunks(c)) {
                        for j in 0..c {
                            sg[j] += grow[j];
                            sgx[j] += grow[j] * xrow[j];
                        }
                    }
                    let mut d = dy.clone();
                    for (drow, xrow) in d.data_mut().chunks_mut(c).zip(xhat.data().chunks(c)) {
                        for j in 0..c {
                            drow[j] = inv_std[j] / n * (n * drow[j] - sg[j] - xrow[j] * sgx[j]);
                        }
                    }
                    accumulate(&mut grads, *a, d);
                }
                Op::Concat { parts, axis } => {
                    let ax = axis_index(*axis);
                    let mut start = 0;
                    for &p in parts {
                        let len = self.shape(p)[ax];
                        accumulate(&mut grads, p, dy.slice(*axis, start, len));
                        start += len;
                    }
                }
                Op::Slice { a, axis, start } => {
                    let mut d = Tensor::zeros(self.shape(*a));
                    d.add_into_slice(*axis, *start, &dy);
                    accumulate(&mut grads, *a, d);
                }
                Op::Reshape { a } => {
                    let shape = self.shape(*a);
                    accumulate(&mut grads, *a, dy.reshape(shape));
                }
                Op::BroadcastBatch { a } => {
                    let shape = self.shape(*a);
                    accumulate(&mut grads, *a, reduce_to(&dy, shape));
                }
                Op::RepeatCols { a, times } => {
                    let shape = self.shape(*a);
                    let d: Vec<f64> = dy.data().chunks(*times).map(|ch| ch.iter().sum()).collect();
                    accumulate(&mut grads, *a, Tensor::from_vec(shape, d));
                }
                Op::MeanRows { a } => {
                    let [b, r, c] = self.shape(*a);
                    let mut d = Tensor::zeros([b, r, c]);
                    for bi in 0..b {
                        for ri in 0..r {
                            for ci in 0..c {
                                d.set(bi, ri, ci, dy.get(bi, 0, ci) / r as f64);
                            }
                        }
                    }
                    accumulate(&mut grads, *a, d);
                }
                Op::MaxRows { a, argmax } => {
                    let [b, r, c] = self.shape(*a);
                    let mut d = Tensor::zeros([b, r, c]);
                    for bi in 0..b {
                        for ci in 0..c {
                            d.set(bi, argmax[bi * c + ci], ci, dy.get(bi, 0, ci));
                        }
                    }
                    accumulate(&mut grads, *a, d);
                }
                Op::Gem { a, p, eps } => {
                    let x = self.value(*a);
                    let pv = self.value(*p).data()[0];
                    let [b, r, c] = x.shape();
                    let mut dx = Tensor::zeros([b, r, c]);
                    let mut dp = 0.0;
                    for bi in 0..b {
                        for ci in 0..c {
                            let g = dy.get(bi, 0, ci);
                            let out = node.value.get(bi, 0, ci);
                            let ys: Vec<f64> = (0..r).map(|ri| x.get(bi, ri, ci).max(*eps)).collect();
                            let m = ys.iter().map(|y| y.powf(pv)).sum::<f64>() / r as f64;
                            let coef = m.powf(1.0 / pv - 1.0) / r as f64;
                            for (ri, y) in ys.iter().enumerate() {
                                if x.get(bi, ri, ci) >= *eps {
                                    dx.set(bi, ri, ci, g * coef * y.powf(pv - 1.0));
                                }
                            }
                            let s = ys.iter().map(|y| y.powf(pv) * y.ln()).sum::<f64>() / r as f64;
                            dp += g * out * (-m.ln() / (pv * pv) + s / (pv * m));
                        }
                    }
                    accumulate(&mut grads, *a, dx);
                    accumulate(&mut grads, *p, Tensor::scalar(dp));
                }
                Op::SumAll { a } => {
                    let g = dy.data()[0];
                    accumulate(&mut grads, *a, Tensor::full(self.shape(*a), g));
                }
                Op::MeanAll { a } => {
                    let g = dy.data()[0] / self.value(*a).len() as f64;
                    accumulate(&mut grads, *a, Tensor::full(self.shape(*a), g));
                }
                Op::PairDist { a, pairs } => {
                    let x = self.value(*a);
                    let mut d = Tensor::zeros(x.shape());
                    let cols = x.cols();
                    for (pi, &(i, j)) in pairs.iter().enumerate() {
                        let dist = node.value.data()[pi];
                        let g = dy.data()[pi];
                        let d2: f64 = x
                            .row(0, i)
                            .iter()
                            .zip(x.row(0, j))
                            .map(|(p, q)| (p - q) * (p - q))
                            .sum();
                        if d2 < DIST_FLOOR || g == 0.0 {
                            continue;
                        }
                        for ci in 0..cols {
                            let diff = (x.get(0, i, ci) - x.get(0, j, ci)) / dist * g;
                            let di = d.get(0, i, ci);
                            d.set(0, i, ci, di + diff);
                            let dj = d.get(0, j, ci);
                            d.set(0, j, ci, dj - diff);
                        }
                    }
                    accumulate(&mut grads, *a, d);
                }
            }
        }
        Gradients {
            nodes: grads,
            params,
        }
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(t) => t.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    assert_eq!(a.shape(), b.shape());
    Tensor::from_vec(
        a.shape(),
        a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
    )
}

/// Apply `f(a, b)` elementwise with `b` broadcast to `a`'s shape.
fn broadcast_zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let sa = a.shape();
    let sb = b.shape();
    if sa == sb {
        return zip_map(a, b, f);
    }
    for d in 0..3 {
        assert!(
            sb[d] == sa[d] || sb[d] == 1,
            "cannot broadcast {sb:?} to {sa:?}"
        );
    }
    let mut out = Vec::with_capacity(a.len());
    for bi in 0..sa[0] {
        let bb = if sb[0] == 1 { 0 } else { bi };
        for ri in 0..sa[1] {
            let rb = if sb[1] == 1 { 0 } else { ri };
            for ci in 0..sa[2] {
                let cb = if sb[2] == 1 { 0 } else { ci };
                out.push(f(a.get(bi, ri, ci), b.get(bb, rb, cb)));
            }
        }
    }
    Tensor::from_vec(sa, out)
}

/// Sum `t` down to `shape` over broadcast axes.
fn reduce_to(t: &Tensor, shape: [usize; 3]) -> Tensor {
    if t.shape() == shape {
        return t.clone();
    }
    let st = t.shape();
    let mut out = Tensor::zeros(shape);
    for bi in 0..st[0] {
        let bb = if shape[0] == 1 { 0 } else { bi };
        for ri in 0..st[1] {
            let rb = if shape[1] == 1 { 0 } else { ri };
            for ci in 0..st[2] {
                let cb = if shape[2] == 1 { 0 } else { ci };
                let v = out.get(bb, rb, cb) + t.get(bi, ri, ci);
                out.set(bb, rb, cb, v);
            }
        }
    }
    out
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in row.iter_mut() {
        *x /= sum;
    }
}

const INV_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * INV_SQRT_2))
}

fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x * INV_SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cdf + x * pdf
}
