//! Dense row-major matrix kernels.
//!
//! One storage convention everywhere: row-major, shape checked at every
//! operation, no implicit broadcasting beyond the row-vector helpers. These
//! are deliberately plain loops; the model sizes this engine targets do not
//! justify a BLAS dependency.

use crate::error::{Error, Result};
use crate::rng::SplitMix64;
use crate::scalar::Scalar;

/// Row-major 2-D array. `E` is a float for numeric work and `bool` for masks.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix<E> {
    rows: usize,
    cols: usize,
    data: Vec<E>,
}

impl<E: Copy> Matrix<E> {
    pub fn from_vec(rows: usize, cols: usize, data: Vec<E>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::DataLength {
                rows,
                cols,
                got: data.len(),
            });
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn filled(rows: usize, cols: usize, value: E) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> E) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Matrix { rows, cols, data }
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

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> E {
        debug_assert!(r < self.rows && c < self.cols);
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: E) {
        debug_assert!(r < self.rows && c < self.cols);
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[E] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [E] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn data(&self) -> &[E] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [E] {
        &mut self.data
    }

    /// Copy of rows `[start, end)` as a new matrix.
    pub fn slice_rows(&self, start: usize, end: usize) -> Self {
        assert!(start <= end && end <= self.rows);
        Matrix {
            rows: end - start,
            cols: self.cols,
            data: self.data[start * self.cols..end * self.cols].to_vec(),
        }
    }

    /// Stack `self` on top of `other` (column counts must match).
    pub fn vstack(&self, other: &Self) -> Result<Self> {
        if self.cols != other.cols && self.rows != 0 && other.rows != 0 {
            return Err(Error::ShapeMismatch {
                op: "vstack",
                left: self.shape(),
                right: other.shape(),
            });
        }
        let cols = if self.rows == 0 { other.cols } else { self.cols };
        let mut data = Vec::with_capacity((self.rows + other.rows) * cols);
        data.extend_from_slice(&self.data);
        data.extend_from_slice(&other.data);
        Ok(Matrix {
            rows: self.rows + other.rows,
            cols,
            data,
        })
    }
}

impl<T: Scalar> Matrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix::filled(rows, cols, T::zero())
    }

    pub fn identity(n: usize) -> Self {
        Matrix::from_fn(n, n, |r, c| if r == c { T::one() } else { T::zero() })
    }

    /// Entries drawn uniformly from [-limit, limit].
    pub fn uniform(rows: usize, cols: usize, limit: f64, rng: &mut SplitMix64) -> Self {
        let mut m = Matrix::zeros(rows, cols);
        for v in m.data.iter_mut() {
            *v = T::from_f64(rng.uniform(-limit, limit));
        }
        m
    }

    /// Xavier/Glorot uniform init for a fan_in x fan_out weight.
    pub fn xavier(fan_in: usize, fan_out: usize, rng: &mut SplitMix64) -> Self {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        Matrix::uniform(fan_in, fan_out, limit, rng)
    }

    pub fn gaussian(rows: usize, cols: usize, sigma: f64, rng: &mut SplitMix64) -> Self {
        let mut m = Matrix::zeros(rows, cols);
        for v in m.data.iter_mut() {
            *v = T::from_f64(rng.normal() * sigma);
        }
        m
    }

    /// Standard matrix product, shape (self.rows x other.cols).
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        if self.cols != other.rows {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                left: self.shape(),
                right: other.shape(),
            });
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        // i-k-j order so the inner loop walks both operands contiguously.
        for i in 0..self.rows {
            let a_row = self.row(i);
            let out_row = out.row_mut(i);
            for (k, &a_ik) in a_row.iter().enumerate() {
                let b_row = &other.data[k * other.cols..(k + 1) * other.cols];
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o = *o + a_ik * b;
                }
            }
        }
        Ok(out)
    }

    pub fn transpose(&self) -> Self {
        Matrix::from_fn(self.cols, self.rows, |r, c| self.at(c, r))
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn hadamard(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "hadamard", |a, b| a * b)
    }

    fn zip_with(&self, other: &Self, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape() != other.shape() {
            return Err(Error::ShapeMismatch {
                op,
                left: self.shape(),
                right: other.shape(),
            });
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }

    pub fn scale(&self, factor: T) -> Self {
        self.map(|v| v * factor)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Add a 1 x cols row vector to every row.
    pub fn add_row_broadcast(&self, row: &Self) -> Result<Self> {
        if row.rows != 1 || row.cols != self.cols {
            return Err(Error::ShapeMismatch {
                op: "add_row_broadcast",
                left: self.shape(),
                right: row.shape(),
            });
        }
        let mut out = self.clone();
        for r in 0..out.rows {
            for (o, &b) in out.row_mut(r).iter_mut().zip(&row.data) {
                *o = *o + b;
            }
        }
        Ok(out)
    }

    pub fn sum(&self) -> T {
        self.data.iter().fold(T::zero(), |acc, &v| acc + v)
    }

    pub fn max_abs(&self) -> T {
        self.data
            .iter()
            .fold(T::zero(), |acc, &v| if v.abs() > acc { v.abs() } else { acc })
    }

    /// Largest |a - b| over all entries.
    pub fn max_abs_diff(&self, other: &Self) -> Result<T> {
        self.zip_with(other, "max_abs_diff", |a, b| a - b)
            .map(|d| d.max_abs())
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Lossy precision cast (widening is exact).
    pub fn cast<U: Scalar>(&self) -> Matrix<U> {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| U::from_f64(v.as_f64())).collect(),
        }
    }
}

/// Row-wise softmax with optional boolean mask (`true` = allowed).
///
/// Masked entries are exactly zero in the output; each row of allowed entries
/// sums to one. Computed with per-row max subtraction so large logits stay
/// finite. A row with no allowed entry is an error.
pub fn row_softmax<T: Scalar>(a: &Matrix<T>, mask: Option<&Matrix<bool>>) -> Result<Matrix<T>> {
    if let Some(m) = mask {
        if m.shape() != a.shape() {
            return Err(Error::ShapeMismatch {
                op: "row_softmax mask",
                left: a.shape(),
                right: m.shape(),
            });
        }
    }
    let mut out = Matrix::zeros(a.rows(), a.cols());
    for r in 0..a.rows() {
        let row = a.row(r);
        let allowed = |c: usize| mask.is_none_or(|m| m.at(r, c));

        let mut max = T::neg_infinity();
        for (c, &v) in row.iter().enumerate() {
            if allowed(c) && v > max {
                max = v;
            }
        }
        if max == T::neg_infinity() {
            return Err(Error::AllMaskedRow { row: r });
        }

        let mut denom = T::zero();
        let out_row = out.row_mut(r);
        for (c, &v) in row.iter().enumerate() {
            if allowed(c) {
                let e = (v - max).exp();
                out_row[c] = e;
                denom = denom + e;
            }
        }
        for v in out_row.iter_mut() {
            *v = *v / denom;
        }
    }
    debug_assert!(out.all_finite());
    Ok(out)
}

/// Row-wise log-softmax (no mask), max-subtracted.
pub fn row_log_softmax<T: Scalar>(a: &Matrix<T>) -> Matrix<T> {
    let mut out = a.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let max = row.iter().fold(T::neg_infinity(), |m, &v| if v > m { v } else { m });
        let mut denom = T::zero();
        for &v in row.iter() {
            denom = denom + (v - max).exp();
        }
        let log_denom = denom.ln() + max;
        for v in row.iter_mut() {
            *v = *v - log_denom;
        }
    }
    out
}

/// log(sum(exp(values))) without overflow. Empty input is -inf.
pub fn logsumexp<T: Scalar>(values: &[T]) -> T {
    let max = values
        .iter()
        .fold(T::neg_infinity(), |m, &v| if v > m { v } else { m });
    if max == T::neg_infinity() {
        return T::neg_infinity();
    }
    let sum = values
        .iter()
        .fold(T::zero(), |acc, &v| acc + (v - max).exp());
    max + sum.ln()
}
