//! Row-major dense matrices, the only array type the network uses.
//!
//! Images are stored channel-last as `(H*W) x C`, token sequences as `n x d`.

use std::fmt::{Debug, Display};

use num_traits::{Float, FromPrimitive, ToPrimitive};

use crate::par;

/// Floating-point element type: `f32` for training, `f64` for gradient checks.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + std::iter::Sum + Default + Debug + Display + Send + Sync + 'static
{
}

impl Scalar for f32 {}
impl Scalar for f64 {}

#[inline]
pub fn cst<T: Scalar>(x: f64) -> T {
    T::from_f64(x).expect("representable constant")
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mat<T> {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> Mat<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, v: T) -> Self {
        Mat {
            rows,
            cols,
            data: vec![v; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Self {
        assert_eq!(rows * cols, data.len(), "Mat::from_vec length");
        Mat { rows, cols, data }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = T::one();
        }
        m
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: T) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn transpose(&self) -> Self {
        let mut out = Self::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    pub fn add_assign(&mut self, other: &Self) {
        assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + *b;
        }
    }

    pub fn cast<U: Scalar>(&self) -> Mat<U> {
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .map(|v| U::from_f64(v.to_f64().unwrap_or(f64::NAN)).unwrap_or(U::nan()))
                .collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// `self @ other`, parallel over output rows when the feature is enabled.
    pub fn matmul(&self, other: &Self) -> Self {
        let mut out = Self::zeros(self.rows, other.cols);
        let work = self.rows * self.cols * other.cols;
        let (k, m) = (self.cols, other.cols);
        assert_eq!(k, other.rows, "matmul inner dims {}x{} @ {}x{}", self.rows, k, other.rows, m);
        par::for_each_row(&mut out.data, m, work, |i, row| {
            gemm_row(&self.data[i * k..(i + 1) * k], &other.data, m, row)
        });
        out
    }

    /// Single-threaded `self @ other`; same result bit for bit as [`Mat::matmul`].
    pub fn matmul_seq(&self, other: &Self) -> Self {
        let mut out = Self::zeros(self.rows, other.cols);
        let (k, m) = (self.cols, other.cols);
        assert_eq!(k, other.rows, "matmul inner dims");
        par::for_each_row_seq(&mut out.data, m, |i, row| {
            gemm_row(&self.data[i * k..(i + 1) * k], &other.data, m, row)
        });
        out
    }

    /// `self^T @ other` without materialising the transpose of `self`.
    pub fn t_matmul(&self, other: &Self) -> Self {
        assert_eq!(self.rows, other.rows, "t_matmul row dims");
        self.transpose().matmul(other)
    }

    /// `self @ other^T`.
    pub fn matmul_t(&self, other: &Self) -> Self {
        assert_eq!(self.cols, other.cols, "matmul_t col dims");
        self.matmul(&other.transpose())
    }
}

#[inline]
fn gemm_row<T: Scalar>(a_row: &[T], b: &[T], m: usize, out: &mut [T]) {
    for (p, &a) in a_row.iter().enumerate() {
        if a == T::zero() {
            continue;
        }
        let b_row = &b[p * m..(p + 1) * m];
        for (o, &bv) in out.iter_mut().zip(b_row) {
            *o = *o + a * bv;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_small() {
        let a = Mat::from_vec(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let b = Mat::from_vec(3, 2, vec![7.0, 8.0, 9.0, 10.0, 11.0, 12.0]);
        let c: Mat<f64> = a.matmul(&b);
        assert_eq!(c.data, vec![58.0, 64.0, 139.0, 154.0]);
        assert_eq!(a.t_matmul(&a).rows, 3);
        assert_eq!(a.matmul_t(&a).data, vec![14.0, 32.0, 32.0, 77.0]);
    }

    #[test]
    fn parallel_and_sequential_agree_bitwise() {
        let a = Mat::<f32>::from_vec(64, 96, (0..64 * 96).map(|i| ((i * 37) % 101) as f32 * 0.013).collect());
        let b = Mat::<f32>::from_vec(96, 80, (0..96 * 80).map(|i| ((i * 11) % 89) as f32 * -0.021).collect());
        assert_eq!(a.matmul(&b).data, a.matmul_seq(&b).data);
    }
}
