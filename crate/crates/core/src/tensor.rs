//! Dense float64 tensors of rank three, `[batch, rows, cols]`.
//!
//! A plain matrix is a tensor with `batch == 1`. Linear layers treat the
//! leading two axes as one flattened row axis.

use std::fmt;

use crate::parallel;

/// Axis selector for concatenation and slicing.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    Batch,
    Row,
    Col,
}

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: [usize; 3],
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

impl Tensor {
    pub fn zeros(shape: [usize; 3]) -> Self {
        Tensor {
            shape,
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn full(shape: [usize; 3], value: f64) -> Self {
        Tensor {
            shape,
            data: vec![value; shape.iter().product()],
        }
    }

    /// Panics if `data.len()` does not match the shape.
    pub fn from_vec(shape: [usize; 3], data: Vec<f64>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "tensor data length does not match shape {shape:?}"
        );
        Tensor { shape, data }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        Self::from_vec([1, rows, cols], data)
    }

    pub fn row_vector(data: Vec<f64>) -> Self {
        let n = data.len();
        Self::from_vec([1, 1, n], data)
    }

    pub fn scalar(v: f64) -> Self {
        Self::from_vec([1, 1, 1], vec![v])
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn batch(&self) -> usize {
        self.shape[0]
    }

    pub fn rows(&self) -> usize {
        self.shape[1]
    }

    pub fn cols(&self) -> usize {
        self.shape[2]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, b: usize, r: usize, c: usize) -> f64 {
        self.data[self.index(b, r, c)]
    }

    pub fn set(&mut self, b: usize, r: usize, c: usize, v: f64) {
        let i = self.index(b, r, c);
        self.data[i] = v;
    }

    #[inline]
    fn index(&self, b: usize, r: usize, c: usize) -> usize {
        debug_assert!(b < self.shape[0] && r < self.shape[1] && c < self.shape[2]);
        (b * self.shape[1] + r) * self.shape[2] + c
    }

    /// Row `r` of batch `b` as a slice.
    pub fn row(&self, b: usize, r: usize) -> &[f64] {
        let start = self.index(b, r, 0);
        &self.data[start..start + self.shape[2]]
    }

    /// Same data under a new shape with the same element count.
    pub fn reshape(mut self, shape: [usize; 3]) -> Self {
        assert_eq!(shape.iter().product::<usize>(), self.data.len());
        self.shape = shape;
        self
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    /// Concatenate along `axis`; all other extents must agree.
    pub fn concat(parts: &[&Tensor], axis: Axis) -> Tensor {
        assert!(!parts.is_empty(), "concat of zero tensors");
        let first = parts[0].shape;
        let ax = axis_index(axis);
        for p in parts {
            for d in 0..3 {
                if d != ax {
                    assert_eq!(p.shape[d], first[d], "concat extent mismatch on axis {d}");
                }
            }
        }
        let mut shape = first;
        shape[ax] = parts.iter().map(|p| p.shape[ax]).sum();
        let mut data = Vec::with_capacity(shape.iter().product());
        // Outer loop count and per-part contiguous block length for this axis.
        let outer: usize = first[..ax].iter().product();
        for o in 0..outer {
            for p in parts {
                let block: usize = p.shape[ax..].iter().product();
                data.extend_from_slice(&p.data[o * block..(o + 1) * block]);
            }
        }
        Tensor { shape, data }
    }

    /// Contiguous sub-range `[start, start+len)` along `axis`.
    pub fn slice(&self, axis: Axis, start: usize, len: usize) -> Tensor {
        let ax = axis_index(axis);
        assert!(start + len <= self.shape[ax], "slice out of range");
        let mut shape = self.shape;
        shape[ax] = len;
        let outer: usize = self.shape[..ax].iter().product();
        let inner: usize = self.shape[ax + 1..].iter().product();
        let block = self.shape[ax] * inner;
        let mut data = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            let base = o * block + start * inner;
            data.extend_from_slice(&self.data[base..base + len * inner]);
        }
        Tensor { shape, data }
    }

    /// Add `src` into the `[start, start+len)` range of `axis` (inverse of
    /// [`slice`](Self::slice) for gradient routing).
    pub fn add_into_slice(&mut self, axis: Axis, start: usize, src: &Tensor) {
        let ax = axis_index(axis);
        let len = src.shape[ax];
        let outer: usize = self.shape[..ax].iter().product();
        let inner: usize = self.shape[ax + 1..].iter().product();
        let block = self.shape[ax] * inner;
        for o in 0..outer {
            let base = o * block + start * inner;
            let s = &src.data[o * len * inner..(o + 1) * len * inner];
            for (d, v) in self.data[base..base + len * inner].iter_mut().zip(s) {
                *d += v;
            }
        }
    }

    /// Matrix product treating `self` as `(batch*rows) x cols` against a
    /// single `[1, cols, n]` weight.
    pub fn matmul_shared(&self, w: &Tensor) -> Tensor {
        assert_eq!(w.batch(), 1);
        assert_eq!(self.cols(), w.rows(), "matmul inner dimension mismatch");
        let m = self.batch() * self.rows();
        let mut out = vec![0.0; m * w.cols()];
        gemm(&self.data, &w.data, m, self.cols(), w.cols(), &mut out);
        Tensor::from_vec([self.batch(), self.rows(), w.cols()], out)
    }
}

pub(crate) fn axis_index(axis: Axis) -> usize {
    match axis {
        Axis::Batch => 0,
        Axis::Row => 1,
        Axis::Col => 2,
    }
}

const PAR_THRESHOLD: usize = 1 << 16;

/// `out += a * b` with `a: m x k`, `b: k x n`, all row-major.
pub(crate) fn gemm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    if n == 0 || m == 0 {
        return;
    }
    let kernel = |i: usize, row: &mut [f64]| {
        let ar = &a[i * k..(i + 1) * k];
        for (p, &av) in ar.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let br = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(br) {
                *o += av * bv;
            }
        }
    };
    if m * k * n >= PAR_THRESHOLD {
        parallel::for_each_chunk_mut(out, n, kernel);
    } else {
        out.chunks_mut(n).enumerate().for_each(|(i, r)| kernel(i, r));
    }
}

/// `out += a * b^T` with `a: m x k`, `b: n x k`.
pub(crate) fn gemm_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    if n == 0 || m == 0 {
        return;
    }
    let kernel = |i: usize, row: &mut [f64]| {
        let ar = &a[i * k..(i + 1) * k];
        for (j, o) in row.iter_mut().enumerate() {
            let br = &b[j * k..(j + 1) * k];
            *o += ar.iter().zip(br).map(|(x, y)| x * y).sum::<f64>();
        }
    };
    if m * k * n >= PAR_THRESHOLD {
        parallel::for_each_chunk_mut(out, n, kernel);
    } else {
        out.chunks_mut(n).enumerate().for_each(|(i, r)| kernel(i, r));
    }
}

/// `out += a^T * b` with `a: m x k`, `b: m x n`; `out` is `k x n`.
pub(crate) fn gemm_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(out.len(), k * n);
    if n == 0 || k == 0 {
        return;
    }
    let kernel = |p: usize, row: &mut [f64]| {
        for i in 0..m {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let br = &b[i * n..(i + 1) * n];
            for (o, &bv) in row.iter_mut().zip(br) {
                *o += av * bv;
            }
        }
    };
    if m * k * n >= PAR_THRESHOLD {
        parallel::for_each_chunk_mut(out, n, kernel);
    } else {
        out.chunks_mut(n).enumerate().for_each(|(p, r)| kernel(p, r));
    }
}
