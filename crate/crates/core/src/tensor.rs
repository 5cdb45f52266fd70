// SPDX-License-Identifier: MIT OR Apache-2.0

//! Dense row-major matrices and the handful of kernels the engine needs.
//!
//! Products go through `matrixmultiply`, which is single-threaded and
//! deterministic for fixed shapes, so repeated runs are bit-identical.

use std::fmt::Debug;
use std::iter::Sum;

use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::error::{MifinError, Result};

/// Floating point types with a GEMM kernel.
pub trait Scalar: Float + Default + Debug + Sum + Send + Sync + 'static {
    /// `c = alpha * a @ b + beta * c` with arbitrary strides.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
        rsc: isize,
        csc: isize,
    );

    fn from_f64(v: f64) -> Self;
}

macro_rules! impl_scalar {
    ($t:ty, $kernel:path) => {
        impl Scalar for $t {
            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                rsa: isize,
                csa: isize,
                b: &[Self],
                rsb: isize,
                csb: isize,
                beta: Self,
                c: &mut [Self],
                rsc: isize,
                csc: isize,
            ) {
                if m == 0 || n == 0 {
                    return;
                }
                // SAFETY: callers pass slices whose extents cover the
                // strided m×k, k×n and m×n views (checked in `Matrix`).
                unsafe {
                    $kernel(
                        m,
                        k,
                        n,
                        alpha,
                        a.as_ptr(),
                        rsa,
                        csa,
                        b.as_ptr(),
                        rsb,
                        csb,
                        beta,
                        c.as_mut_ptr(),
                        rsc,
                        csc,
                    )
                }
            }

            fn from_f64(v: f64) -> Self {
                v as $t
            }
        }
    };
}

impl_scalar!(f32, matrixmultiply::sgemm);
impl_scalar!(f64, matrixmultiply::dgemm);

/// Row-major dense matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Matrix<T = f32> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Scalar> Matrix<T> {
    pub fn new(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(MifinError::shape(
                "matrix",
                format!("{} values for a {rows}x{cols} matrix", data.len()),
            ));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != cols {
                return Err(MifinError::shape(
                    "matrix",
                    format!("row {i} has {} values, expected {cols}", r.len()),
                ));
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn(n, n, |r, c| if r == c { T::one() } else { T::zero() })
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: T) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [T] {
        let cols = self.cols;
        &mut self.data[r * cols..(r + 1) * cols]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[T]> {
        // chunks_exact(0) panics, zero-width matrices have no visible rows
        let cols = self.cols.max(1);
        self.data.chunks_exact(cols).take(if self.cols == 0 { 0 } else { self.rows })
    }

    pub fn column(&self, c: usize) -> Vec<T> {
        (0..self.rows).map(|r| self.get(r, c)).collect()
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |r, c| self.get(c, r))
    }

    /// Select a subset of rows, in the given order.
    pub fn select_rows(&self, idx: &[usize]) -> Self {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Self {
            rows: idx.len(),
            cols: self.cols,
            data,
        }
    }

    /// Columns `start..start + width` of every row.
    pub fn column_block(&self, start: usize, width: usize) -> Self {
        let mut data = Vec::with_capacity(self.rows * width);
        for r in 0..self.rows {
            data.extend_from_slice(&self.row(r)[start..start + width]);
        }
        Self {
            rows: self.rows,
            cols: width,
            data,
        }
    }

    pub fn set_column_block(&mut self, start: usize, block: &Matrix<T>) {
        for r in 0..self.rows {
            self.row_mut(r)[start..start + block.cols].copy_from_slice(block.row(r));
        }
    }

    /// `self @ other`.
    pub fn matmul(&self, other: &Matrix<T>) -> Matrix<T> {
        let mut out = Matrix::zeros(self.rows, other.cols);
        gemm_into(self, false, other, false, &mut out, T::one(), T::zero());
        out
    }

    /// `self @ other^T`.
    pub fn matmul_t(&self, other: &Matrix<T>) -> Matrix<T> {
        let mut out = Matrix::zeros(self.rows, other.rows);
        gemm_into(self, false, other, true, &mut out, T::one(), T::zero());
        out
    }

    /// `self^T @ other`.
    pub fn t_matmul(&self, other: &Matrix<T>) -> Matrix<T> {
        let mut out = Matrix::zeros(self.cols, other.cols);
        gemm_into(self, true, other, false, &mut out, T::one(), T::zero());
        out
    }

    /// Add `bias` to every row.
    pub fn add_row_vector(&mut self, bias: &[T]) {
        debug_assert_eq!(bias.len(), self.cols);
        for row in self.data.chunks_exact_mut(self.cols.max(1)) {
            for (v, b) in row.iter_mut().zip(bias) {
                *v = *v + *b;
            }
        }
    }

    pub fn add_assign(&mut self, other: &Matrix<T>) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + *b;
        }
    }

    pub fn map_inplace(&mut self, f: impl Fn(T) -> T) {
        for v in &mut self.data {
            *v = f(*v);
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<U: Scalar>(&self) -> Matrix<U> {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .map(|v| U::from_f64(v.to_f64().unwrap_or(f64::NAN)))
                .collect(),
        }
    }
}

/// `c = alpha * op(a) @ op(b) + beta * c` where `op` optionally transposes.
pub fn gemm_into<T: Scalar>(
    a: &Matrix<T>,
    a_t: bool,
    b: &Matrix<T>,
    b_t: bool,
    c: &mut Matrix<T>,
    alpha: T,
    beta: T,
) {
    let (m, k) = if a_t { (a.cols, a.rows) } else { (a.rows, a.cols) };
    let (kb, n) = if b_t { (b.cols, b.rows) } else { (b.rows, b.cols) };
    assert_eq!(k, kb, "inner dimensions differ");
    assert_eq!((c.rows, c.cols), (m, n), "output shape differs");
    let (rsa, csa) = if a_t { (1, a.cols as isize) } else { (a.cols as isize, 1) };
    let (rsb, csb) = if b_t { (1, b.cols as isize) } else { (b.cols as isize, 1) };
    if k == 0 {
        c.map_inplace(|v| v * beta);
        return;
    }
    T::gemm(
        m,
        k,
        n,
        alpha,
        &a.data,
        rsa,
        csa,
        &b.data,
        rsb,
        csb,
        beta,
        &mut c.data,
        c.cols as isize,
        1,
    );
}

pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(x, y)| *x * *y).sum()
}

pub fn l2_norm<T: Scalar>(a: &[T]) -> T {
    dot(a, a).sqrt()
}

/// Cosine similarity; zero vectors have similarity 0 with everything.
pub fn cosine(a: &[f32], b: &[f32]) -> f32 {
    let na = l2_norm(a);
    let nb = l2_norm(b);
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot(a, b) / (na * nb)
    }
}

/// Numerically stable softmax of one row, computed in f64.
pub fn softmax(row: &[f32]) -> Vec<f32> {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let exps: Vec<f64> = row.iter().map(|v| ((v - max) as f64).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| (e / total) as f32).collect()
}

/// Index of the largest element; the lowest index wins ties.
pub fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}
