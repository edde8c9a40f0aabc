//! Dense row-major matrices. Vectors are 1-by-n or n-by-1 tensors and
//! scalars are 1-by-1; nothing in the pipeline needs more than two axes.

use crate::error::{Error, Result};
use crate::rng::SeedRng;
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: T) -> Self {
        Tensor {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Contract(format!(
                "tensor data length {} does not match shape {}x{}",
                data.len(),
                rows,
                cols
            )));
        }
        Ok(Tensor { rows, cols, data })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Tensor { rows, cols, data }
    }

    /// Identity matrix.
    pub fn eye(n: usize) -> Self {
        Tensor::from_fn(n, n, |i, j| if i == j { T::one() } else { T::zero() })
    }

    /// Entries drawn i.i.d. from `N(0, std^2)`.
    pub fn randn(rows: usize, cols: usize, std: f64, rng: &mut SeedRng) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows * cols {
            data.push(rng.normal_scaled::<T>(std));
        }
        Tensor { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> T {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: T) {
        self.data[i * self.cols + j] = v;
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn scale(&self, c: T) -> Self {
        self.map(|x| x * c)
    }

    pub fn add(&self, other: &Tensor<T>) -> Result<Self> {
        self.zip("add", other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor<T>) -> Result<Self> {
        self.zip("sub", other, |a, b| a - b)
    }

    fn zip(&self, op: &'static str, other: &Tensor<T>, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape() != other.shape() {
            return Err(Error::ShapeMismatch {
                op,
                lhs: format!("{:?}", self.shape()),
                rhs: format!("{:?}", other.shape()),
            });
        }
        Ok(Tensor {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    /// `self += c * other`, in place.
    pub fn add_scaled(&mut self, other: &Tensor<T>, c: T) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::ShapeMismatch {
                op: "add_scaled",
                lhs: format!("{:?}", self.shape()),
                rhs: format!("{:?}", other.shape()),
            });
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += c * b;
        }
        Ok(())
    }

    pub fn matmul(&self, other: &Tensor<T>) -> Result<Self> {
        if self.cols != other.rows {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: format!("{:?}", self.shape()),
                rhs: format!("{:?}", other.shape()),
            });
        }
        let mut out = Tensor::zeros(self.rows, other.cols);
        gemm_nn(
            &self.data, &other.data, self.rows, self.cols, other.cols, &mut out.data,
        );
        Ok(out)
    }

    pub fn transpose(&self) -> Self {
        let mut out = Tensor::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    pub fn frob_norm(&self) -> f64 {
        self.data
            .iter()
            .map(|&x| {
                let v = x.to_f64();
                v * v
            })
            .sum::<f64>()
            .sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data
            .iter()
            .map(|&x| x.to_f64().abs())
            .fold(0.0, f64::max)
    }

    pub fn max_abs_diff(&self, other: &Tensor<T>) -> f64 {
        assert_eq!(self.shape(), other.shape());
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a.to_f64() - b.to_f64()).abs())
            .fold(0.0, f64::max)
    }

    pub fn has_non_finite(&self) -> bool {
        self.data.iter().any(|x| !x.is_finite())
    }

    /// Exact bitwise equality, distinguishing `-0.0` from `0.0`.
    pub fn bit_eq(&self, other: &Tensor<T>) -> bool {
        self.shape() == other.shape()
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(&a, &b)| a.to_f64().to_bits() == b.to_f64().to_bits())
    }

    pub fn to_le_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.data.len() * T::DTYPE.size_bytes());
        for &v in &self.data {
            v.write_le(&mut out);
        }
        out
    }

    pub fn from_le_bytes(rows: usize, cols: usize, bytes: &[u8]) -> Result<Self> {
        let w = T::DTYPE.size_bytes();
        if bytes.len() != rows * cols * w {
            return Err(Error::Contract(format!(
                "byte payload of {} does not match {}x{} {}",
                bytes.len(),
                rows,
                cols,
                T::DTYPE.name()
            )));
        }
        let data = bytes.chunks_exact(w).map(T::read_le).collect();
        Ok(Tensor { rows, cols, data })
    }
}

/// `out += a(m x k) . b(k x n)`, all row-major.
pub fn gemm_nn<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let out_row = &mut out[i * n..(i + 1) * n];
        for (t, &a_it) in a_row.iter().enumerate() {
            if a_it == T::zero() {
                continue;
            }
            let b_row = &b[t * n..(t + 1) * n];
            for (o, &b_tj) in out_row.iter_mut().zip(b_row) {
                *o += a_it * b_tj;
            }
        }
    }
}

/// `out += a(m x k) . b^T` where `b` is stored `n x k` row-major.
pub fn gemm_nt<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let out_row = &mut out[i * n..(i + 1) * n];
        for (j, o) in out_row.iter_mut().enumerate() {
            let b_row = &b[j * k..(j + 1) * k];
            let mut acc = T::zero();
            for (&x, &y) in a_row.iter().zip(b_row) {
                acc += x * y;
            }
            *o += acc;
        }
    }
}

/// `out += a^T . b` where `a` is stored `k x m` and `b` is `k x n` row-major.
pub fn gemm_tn<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for t in 0..k {
        let a_row = &a[t * m..(t + 1) * m];
        let b_row = &b[t * n..(t + 1) * n];
        for (i, &a_ti) in a_row.iter().enumerate() {
            if a_ti == T::zero() {
                continue;
            }
            let out_row = &mut out[i * n..(i + 1) * n];
            for (o, &b_tj) in out_row.iter_mut().zip(b_row) {
                *o += a_ti * b_tj;
            }
        }
    }
}
