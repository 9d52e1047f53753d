//! Dense row-major tensors.
//!
//! `Tensor` is the universal numeric currency of the crate: feature maps are
//! `C×H×W`, matrices are `M×N`, conv kernels are `Cout×Cin×3×3`. Data is
//! `f64` in memory; the on-disk exchange format is 32-bit (see [`io`]).

mod ops;
pub mod io;

pub(crate) use ops::{conv_interior, nearest_index, pool_span};

use crate::error::{Error, Result};

/// Dense n-dimensional array, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Build a tensor from a shape and a flat row-major buffer.
    pub fn from_vec(shape: Vec<usize>, data: Vec<f64>) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::shape(format!("zero dimension in shape {shape:?}")));
        }
        if numel != data.len() {
            return Err(Error::shape(format!(
                "shape {shape:?} implies {numel} elements, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; numel],
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Tensor {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    pub fn scalar(value: f64) -> Tensor {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    /// 2-D convenience constructor from nested rows.
    pub fn from_rows(rows: &[&[f64]]) -> Tensor {
        let m = rows.len();
        let n = if m == 0 { 0 } else { rows[0].len() };
        assert!(rows.iter().all(|r| r.len() == n), "ragged rows");
        let mut data = Vec::with_capacity(m * n);
        for r in rows {
            data.extend_from_slice(r);
        }
        Tensor {
            shape: vec![m, n],
            data,
        }
    }

    /// Identity matrix of size `n×n`.
    pub fn eye(n: usize) -> Tensor {
        let mut t = Tensor::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Reinterpret the buffer under a new shape with the same element count.
    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(Error::shape(format!(
                "cannot reshape {:?} ({} elements) to {shape:?} ({numel})",
                self.shape,
                self.data.len()
            )));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn at2(&self, i: usize, j: usize) -> f64 {
        debug_assert_eq!(self.rank(), 2);
        self.data[i * self.shape[1] + j]
    }

    pub fn at3(&self, c: usize, y: usize, x: usize) -> f64 {
        debug_assert_eq!(self.rank(), 3);
        self.data[(c * self.shape[1] + y) * self.shape[2] + x]
    }

    pub fn set2(&mut self, i: usize, j: usize, v: f64) {
        debug_assert_eq!(self.rank(), 2);
        let n = self.shape[1];
        self.data[i * n + j] = v;
    }

    pub fn set3(&mut self, c: usize, y: usize, x: usize, v: f64) {
        debug_assert_eq!(self.rank(), 3);
        let (h, w) = (self.shape[1], self.shape[2]);
        self.data[(c * h + y) * w + x] = v;
    }

    /// Row `i` of a rank-2 tensor.
    pub fn row(&self, i: usize) -> &[f64] {
        debug_assert_eq!(self.rank(), 2);
        let n = self.shape[1];
        &self.data[i * n..(i + 1) * n]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Largest absolute elementwise difference; `None` on shape mismatch.
    pub fn max_abs_diff(&self, other: &Tensor) -> Option<f64> {
        if self.shape != other.shape {
            return None;
        }
        Some(
            self.data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max),
        )
    }

    /// Frobenius norm.
    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub(crate) fn check_same_shape(&self, other: &Tensor, op: &str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape(format!(
                "{op}: {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(())
    }
}
