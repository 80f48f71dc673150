//! Differentiable primitive operations.
//!
//! Layers are written once against the [`Ops`] trait and run either eagerly
//! (inference, decoding, benchmarks) or on a recording [`Graph`](super::Graph)
//! that supports reverse-mode gradients.

use std::sync::Arc;

use super::params::{ParamId, ParamStore};
use super::tensor::{self, Tensor};
use crate::error::{Error, Result};

pub trait Ops {
    type V: Clone;

    fn param(&mut self, id: ParamId) -> Self::V;
    fn constant(&mut self, t: Tensor) -> Self::V;
    fn value<'b>(&'b self, v: &'b Self::V) -> &'b Tensor;

    /// `[m x k] * [k x n]`
    fn matmul(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V>;
    /// Elementwise sum; `b` may be a `1 x n` row broadcast over the rows of `a`.
    fn add(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V>;
    fn mul(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V>;
    fn scale(&mut self, a: &Self::V, factor: f64) -> Self::V;
    fn sigmoid(&mut self, a: &Self::V) -> Self::V;
    fn tanh(&mut self, a: &Self::V) -> Self::V;
    fn slice_cols(&mut self, a: &Self::V, start: usize, width: usize) -> Result<Self::V>;
    fn concat_cols(&mut self, parts: &[Self::V]) -> Result<Self::V>;
    fn concat_rows(&mut self, parts: &[Self::V]) -> Result<Self::V>;
    fn gather_rows(&mut self, a: &Self::V, rows: &[usize]) -> Result<Self::V>;
    fn transpose(&mut self, a: &Self::V) -> Self::V;
    fn log_softmax(&mut self, a: &Self::V) -> Self::V;
    fn softmax(&mut self, a: &Self::V) -> Self::V;
    /// `out[u * T + t] = a[t] + b[u]` for `a: T x n`, `b: U x n`.
    fn outer_sum(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V>;
}

/// Eager evaluation against a parameter store; no gradient bookkeeping.
pub struct Eager<'a> {
    store: &'a ParamStore,
}

impl<'a> Eager<'a> {
    pub fn new(store: &'a ParamStore) -> Self {
        Eager { store }
    }
}

impl Ops for Eager<'_> {
    type V = Arc<Tensor>;

    fn param(&mut self, id: ParamId) -> Self::V {
        self.store.shared(id)
    }

    fn constant(&mut self, t: Tensor) -> Self::V {
        Arc::new(t)
    }

    fn value<'b>(&'b self, v: &'b Self::V) -> &'b Tensor {
        v
    }

    fn matmul(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V> {
        Ok(Arc::new(tensor::matmul(a, b)?))
    }

    fn add(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V> {
        Ok(Arc::new(kernels::add(a, b)?))
    }

    fn mul(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V> {
        Ok(Arc::new(kernels::mul(a, b)?))
    }

    fn scale(&mut self, a: &Self::V, factor: f64) -> Self::V {
        Arc::new(a.map(|v| v * factor))
    }

    fn sigmoid(&mut self, a: &Self::V) -> Self::V {
        Arc::new(a.map(kernels::sigmoid))
    }

    fn tanh(&mut self, a: &Self::V) -> Self::V {
        Arc::new(a.map(f64::tanh))
    }

    fn slice_cols(&mut self, a: &Self::V, start: usize, width: usize) -> Result<Self::V> {
        Ok(Arc::new(kernels::slice_cols(a, start, width)?))
    }

    fn concat_cols(&mut self, parts: &[Self::V]) -> Result<Self::V> {
        let refs: Vec<&Tensor> = parts.iter().map(|p| p.as_ref()).collect();
        Ok(Arc::new(kernels::concat_cols(&refs)?))
    }

    fn concat_rows(&mut self, parts: &[Self::V]) -> Result<Self::V> {
        let refs: Vec<&Tensor> = parts.iter().map(|p| p.as_ref()).collect();
        Ok(Arc::new(kernels::concat_rows(&refs)?))
    }

    fn gather_rows(&mut self, a: &Self::V, rows: &[usize]) -> Result<Self::V> {
        Ok(Arc::new(kernels::gather_rows(a, rows)?))
    }

    fn transpose(&mut self, a: &Self::V) -> Self::V {
        Arc::new(kernels::transpose(a))
    }

    fn log_softmax(&mut self, a: &Self::V) -> Self::V {
        Arc::new(kernels::log_softmax_rows(a))
    }

    fn softmax(&mut self, a: &Self::V) -> Self::V {
        Arc::new(kernels::softmax_rows(a))
    }

    fn outer_sum(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V> {
        Ok(Arc::new(kernels::outer_sum(a, b)?))
    }
}

/// Forward kernels shared by both execution modes.
pub(crate) mod kernels {
    use super::*;

    pub fn sigmoid(x: f64) -> f64 {
        if x >= 0.0 {
            1.0 / (1.0 + (-x).exp())
        } else {
            let e = x.exp();
            e / (1.0 + e)
        }
    }

    pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let (m, n) = (a.rows(), a.cols());
        if b.cols() != n || (b.rows() != m && b.rows() != 1) {
            return Err(Error::shape(format!(
                "add {m}x{n} with {}x{}",
                b.rows(),
                b.cols()
            )));
        }
        let mut out = a.data().to_vec();
        if b.rows() == m {
            for (o, v) in out.iter_mut().zip(b.data()) {
                *o += v;
            }
        } else {
            for row in out.chunks_mut(n.max(1)) {
                for (o, v) in row.iter_mut().zip(b.data()) {
                    *o += v;
                }
            }
        }
        Tensor::matrix(m, n, out)
    }

    pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
        if !a.same_shape(b) {
            return Err(Error::shape(format!(
                "elementwise product {}x{} with {}x{}",
                a.rows(),
                a.cols(),
                b.rows(),
                b.cols()
            )));
        }
        let out = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
        Tensor::matrix(a.rows(), a.cols(), out)
    }

    pub fn slice_cols(a: &Tensor, start: usize, width: usize) -> Result<Tensor> {
        let (m, n) = (a.rows(), a.cols());
        if start + width > n {
            return Err(Error::shape(format!(
                "columns {start}..{} of {n}",
                start + width
            )));
        }
        let mut out = Vec::with_capacity(m * width);
        for r in 0..m {
            out.extend_from_slice(&a.row(r)[start..start + width]);
        }
        Tensor::matrix(m, width, out)
    }

    pub fn concat_cols(parts: &[&Tensor]) -> Result<Tensor> {
        let m = parts.first().map_or(0, |p| p.rows());
        if parts.iter().any(|p| p.rows() != m) {
            return Err(Error::shape("concat_cols with differing row counts"));
        }
        let n: usize = parts.iter().map(|p| p.cols()).sum();
        let mut out = Vec::with_capacity(m * n);
        for r in 0..m {
            for p in parts {
                out.extend_from_slice(p.row(r));
            }
        }
        Tensor::matrix(m, n, out)
    }

    pub fn concat_rows(parts: &[&Tensor]) -> Result<Tensor> {
        let n = parts.first().map_or(0, |p| p.cols());
        if parts.iter().any(|p| p.cols() != n) {
            return Err(Error::shape("concat_rows with differing column counts"));
        }
        let m: usize = parts.iter().map(|p| p.rows()).sum();
        let mut out = Vec::with_capacity(m * n);
        for p in parts {
            out.extend_from_slice(p.data());
        }
        Tensor::matrix(m, n, out)
    }

    pub fn gather_rows(a: &Tensor, rows: &[usize]) -> Result<Tensor> {
        let n = a.cols();
        let mut out = Vec::with_capacity(rows.len() * n);
        for &r in rows {
            if r >= a.rows() {
                return Err(Error::shape(format!("row {r} of {}", a.rows())));
            }
            out.extend_from_slice(a.row(r));
        }
        Tensor::matrix(rows.len(), n, out)
    }

    pub fn transpose(a: &Tensor) -> Tensor {
        let (m, n) = (a.rows(), a.cols());
        let mut out = vec![0.0; m * n];
        for r in 0..m {
            for c in 0..n {
                out[c * m + r] = a.data()[r * n + c];
            }
        }
        Tensor::matrix(n, m, out).expect("transpose keeps element count")
    }

    pub fn log_softmax_rows(a: &Tensor) -> Tensor {
        let n = a.cols();
        let mut out = vec![0.0; a.numel()];
        for r in 0..a.rows() {
            tensor::log_softmax_row(a.row(r), &mut out[r * n..(r + 1) * n]);
        }
        Tensor::matrix(a.rows(), n, out).expect("same shape")
    }

    pub fn softmax_rows(a: &Tensor) -> Tensor {
        let mut t = log_softmax_rows(a);
        for v in t.data_mut() {
            *v = v.exp();
        }
        t
    }

    pub fn outer_sum(a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let (t_len, n) = (a.rows(), a.cols());
        if b.cols() != n {
            return Err(Error::shape(format!(
                "outer_sum widths {n} and {}",
                b.cols()
            )));
        }
        let u_len = b.rows();
        let mut out = Vec::with_capacity(u_len * t_len * n);
        for u in 0..u_len {
            let brow = b.row(u);
            for t in 0..t_len {
                out.extend(a.row(t).iter().zip(brow).map(|(x, y)| x + y));
            }
        }
        Tensor::matrix(u_len * t_len, n, out)
    }
}
