//! Dense row-major matrices and the handful of kernels the heads need.

use std::fmt::Debug;
use std::ops::{Add, AddAssign, Mul};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};

/// Weight scalar. Heads are generic over this so benches can run in `f32`
/// while training and simulation stay in `f64`.
pub trait Scalar:
    Copy + Default + Debug + PartialOrd + Send + Sync + Add<Output = Self> + Mul<Output = Self> + AddAssign + 'static
{
    const ZERO: Self;
    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Scalar for f64 {
    const ZERO: Self = 0.0;
    #[inline]
    fn from_f64(x: f64) -> Self {
        x
    }
    #[inline]
    fn to_f64(self) -> f64 {
        self
    }
}

impl Scalar for f32 {
    const ZERO: Self = 0.0;
    #[inline]
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    #[inline]
    fn to_f64(self) -> f64 {
        self as f64
    }
}

/// Dot product with eight independent accumulators so the compiler can
/// vectorize it. The summation order is fixed, so equal inputs give
/// bit-identical outputs regardless of which head calls it.
#[inline]
pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [T::ZERO; 8];
    let chunks_a = a.chunks_exact(8);
    let chunks_b = b.chunks_exact(8);
    let tail_a = chunks_a.remainder();
    let tail_b = chunks_b.remainder();
    for (ca, cb) in chunks_a.zip(chunks_b) {
        for i in 0..8 {
            acc[i] += ca[i] * cb[i];
        }
    }
    let mut sum = ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]));
    for (x, y) in tail_a.iter().zip(tail_b) {
        sum += *x * *y;
    }
    sum
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix<T = f64> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Scalar> Matrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![T::ZERO; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(LabError::dims("matrix data", rows * cols, data.len()));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn(n, n, |i, j| if i == j { T::from_f64(1.0) } else { T::ZERO })
    }

    /// Entries drawn i.i.d. from uniform(-bound, bound).
    pub fn uniform<R: Rng + ?Sized>(rows: usize, cols: usize, bound: f64, rng: &mut R) -> Self {
        let data = (0..rows * cols)
            .map(|_| T::from_f64(rng.gen_range(-bound..=bound)))
            .collect();
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
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
    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> T {
        self.data[i * self.cols + j]
    }

    pub fn map<U: Scalar>(&self, f: impl Fn(T) -> U) -> Matrix<U> {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> Matrix<U> {
        self.map(|x| U::from_f64(x.to_f64()))
    }

    /// `self · x`.
    pub fn matvec(&self, x: &[T]) -> Vec<T> {
        debug_assert_eq!(x.len(), self.cols);
        (0..self.rows).map(|i| dot(self.row(i), x)).collect()
    }

    /// `self · x` for a batch of vectors, streaming each weight row once.
    /// Output is row-major `rows × batch`.
    pub fn matmul_batch(&self, xs: &[Vec<T>]) -> Vec<T> {
        let b = xs.len();
        let mut out = vec![T::ZERO; self.rows * b];
        for i in 0..self.rows {
            let row = self.row(i);
            for (j, x) in xs.iter().enumerate() {
                out[i * b + j] = dot(row, x);
            }
        }
        out
    }

    /// `selfᵀ · y`.
    pub fn matvec_t(&self, y: &[T]) -> Vec<T> {
        debug_assert_eq!(y.len(), self.rows);
        let mut out = vec![T::ZERO; self.cols];
        for (i, &yi) in y.iter().enumerate() {
            for (o, &w) in out.iter_mut().zip(self.row(i)) {
                *o += w * yi;
            }
        }
        out
    }

    /// `self += a · bᵀ`.
    pub fn add_outer(&mut self, a: &[T], b: &[T]) {
        debug_assert_eq!(a.len(), self.rows);
        debug_assert_eq!(b.len(), self.cols);
        for (i, &ai) in a.iter().enumerate() {
            for (w, &bj) in self.row_mut(i).iter_mut().zip(b) {
                *w += ai * bj;
            }
        }
    }

    /// Materialized product `self · other`. Only used by oracles and tests.
    pub fn matmul(&self, other: &Matrix<T>) -> Result<Matrix<T>> {
        if self.cols != other.rows {
            return Err(LabError::dims("matmul inner dimension", self.cols, other.rows));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.get(i, k);
                for j in 0..other.cols {
                    out.data[i * other.cols + j] += a * other.get(k, j);
                }
            }
        }
        Ok(out)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.to_f64().is_finite())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::rng_for;

    #[test]
    fn dot_handles_tails() {
        let a: Vec<f64> = (0..13).map(|i| i as f64).collect();
        let b = vec![1.0; 13];
        assert_eq!(dot(&a, &b), 78.0);
    }

    #[test]
    fn transpose_product_matches_naive() {
        let mut rng = rng_for(1, "linalg");
        let m = Matrix::<f64>::uniform(5, 3, 1.0, &mut rng);
        let y = [0.5, -1.0, 2.0, 0.25, 1.5];
        let got = m.matvec_t(&y);
        for j in 0..3 {
            let want: f64 = (0..5).map(|i| m.get(i, j) * y[i]).sum();
            assert!((got[j] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn batch_product_matches_matvec() {
        let mut rng = rng_for(2, "linalg");
        let m = Matrix::<f32>::uniform(7, 9, 1.0, &mut rng);
        let xs: Vec<Vec<f32>> = (0..3).map(|k| (0..9).map(|j| (j + k) as f32 * 0.1).collect()).collect();
        let out = m.matmul_batch(&xs);
        for (j, x) in xs.iter().enumerate() {
            let col = m.matvec(x);
            for i in 0..7 {
                assert_eq!(out[i * 3 + j], col[i]);
            }
        }
    }

    #[test]
    fn from_vec_rejects_bad_length() {
        assert!(Matrix::<f64>::from_vec(2, 2, vec![1.0; 3]).is_err());
    }
}
