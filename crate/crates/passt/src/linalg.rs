//! Dense row-major matrices and the scalar abstraction.
//!
//! The network runs in `f32` for training and `f64` for gradient checking,
//! so everything numeric is generic over [`Scalar`]. Matrix products come in
//! the three layouts backward passes need (`A*B`, `A^T*B`, `A*B^T`) to avoid
//! materializing transposes.

use crate::error::{Error, Result};
use num_traits::Float;
use std::fmt::Debug;

/// Element type of all network tensors. Implemented for `f32` and `f64`.
pub trait Scalar: Float + Debug + Default + Send + Sync + 'static {
    /// TENSORBIN dtype code (1 = f32, 2 = f64).
    const DTYPE: u8;

    fn from_f64(x: f64) -> Self;
    fn to_f64_(self) -> f64;
    fn from_f32(x: f32) -> Self;
}

impl Scalar for f32 {
    const DTYPE: u8 = 1;
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    fn to_f64_(self) -> f64 {
        self as f64
    }
    fn from_f32(x: f32) -> Self {
        x
    }
}

impl Scalar for f64 {
    const DTYPE: u8 = 2;
    fn from_f64(x: f64) -> Self {
        x
    }
    fn to_f64_(self) -> f64 {
        self
    }
    fn from_f32(x: f32) -> Self {
        x as f64
    }
}

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Mat<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Scalar> Mat<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(format!(
                "matrix data length {} does not match {}x{}",
                data.len(),
                rows,
                cols
            )));
        }
        Ok(Mat { rows, cols, data })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Mat { rows, cols, data }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> T {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: T) {
        self.data[i * self.cols + j] = v;
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
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

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Mat<T> {
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Mat<T>) {
        debug_assert_eq!(self.rows, other.rows);
        debug_assert_eq!(self.cols, other.cols);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + *b;
        }
    }

    pub fn scale(&mut self, c: T) {
        for v in &mut self.data {
            *v = *v * c;
        }
    }

    /// `self (m x k) * other (k x n)`.
    pub fn matmul(&self, other: &Mat<T>) -> Mat<T> {
        assert_eq!(self.cols, other.rows, "matmul inner dimension mismatch");
        let (m, k, n) = (self.rows, self.cols, other.cols);
        let mut out = Mat::zeros(m, n);
        for i in 0..m {
            let a_row = self.row(i);
            let out_row = out.row_mut(i);
            for (l, &a_il) in a_row.iter().enumerate().take(k) {
                if a_il == T::zero() {
                    continue;
                }
                let b_row = other.row(l);
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o = *o + a_il * b;
                }
            }
        }
        out
    }

    /// `self^T (m x k)^T=(k x m) ... ` i.e. `self (k x m), other (k x n) -> m x n`.
    pub fn matmul_tn(&self, other: &Mat<T>) -> Mat<T> {
        assert_eq!(self.rows, other.rows, "matmul_tn row mismatch");
        let (k, m, n) = (self.rows, self.cols, other.cols);
        let mut out = Mat::zeros(m, n);
        for l in 0..k {
            let a_row = self.row(l);
            let b_row = other.row(l);
            for (i, &a_li) in a_row.iter().enumerate() {
                if a_li == T::zero() {
                    continue;
                }
                let out_row = out.row_mut(i);
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o = *o + a_li * b;
                }
            }
        }
        out
    }

    /// `self (m x k) * other^T (n x k)^T -> m x n`.
    pub fn matmul_nt(&self, other: &Mat<T>) -> Mat<T> {
        assert_eq!(self.cols, other.cols, "matmul_nt column mismatch");
        let (m, n) = (self.rows, other.rows);
        let mut out = Mat::zeros(m, n);
        for i in 0..m {
            let a_row = self.row(i);
            let out_row = out.row_mut(i);
            for (j, o) in out_row.iter_mut().enumerate().take(n) {
                *o = dot(a_row, other.row(j));
            }
        }
        out
    }

    /// Sum of each column, as a length-`cols` vector.
    pub fn col_sums(&self) -> Vec<T> {
        let mut out = vec![T::zero(); self.cols];
        for i in 0..self.rows {
            for (o, &v) in out.iter_mut().zip(self.row(i)) {
                *o = *o + v;
            }
        }
        out
    }

    /// Stack rows of `mats` vertically. All inputs must share `cols`.
    pub fn vstack(mats: &[&Mat<T>]) -> Result<Mat<T>> {
        let cols = mats
            .first()
            .ok_or_else(|| Error::shape("vstack of zero matrices"))?
            .cols;
        let mut data = Vec::new();
        let mut rows = 0;
        for m in mats {
            if m.cols != cols {
                return Err(Error::shape("vstack column mismatch"));
            }
            rows += m.rows;
            data.extend_from_slice(&m.data);
        }
        Ok(Mat { rows, cols, data })
    }
}

#[inline]
pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        acc = acc + x * y;
    }
    acc
}

/// `y += alpha * x`.
#[inline]
pub fn axpy<T: Scalar>(alpha: T, x: &[T], y: &mut [T]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi = *yi + alpha * xi;
    }
}
