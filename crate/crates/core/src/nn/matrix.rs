//! Row-major dense matrix of 64-bit reals.
//!
//! All model math runs on this one type. The three multiply kernels cover
//! the forward pass and both backward products without materializing
//! transposes.

use crate::{Result, UmcError};

#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len(), "matrix data length {} != {rows}x{cols}", data.len());
        Matrix { rows, cols, data }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let r = rows.len();
        let c = if r == 0 { 0 } else { rows[0].len() };
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend_from_slice(row);
        }
        Matrix { rows: r, cols: c, data }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Matrix { rows, cols, data }
    }

    pub fn scalar(x: f64) -> Self {
        Matrix { rows: 1, cols: 1, data: vec![x] }
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
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        debug_assert!(i < self.rows && j < self.cols);
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, x: f64) {
        debug_assert!(i < self.rows && j < self.cols);
        self.data[i * self.cols + j] = x;
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols;
        &self.data[i * c..(i + 1) * c]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let c = self.cols;
        &mut self.data[i * c..(i + 1) * c]
    }

    #[inline]
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    /// The single entry of a 1x1 matrix.
    pub fn item(&self) -> f64 {
        assert_eq!((self.rows, self.cols), (1, 1), "item() on {}x{}", self.rows, self.cols);
        self.data[0]
    }

    pub fn same_shape(&self, other: &Matrix) -> bool {
        self.rows == other.rows && self.cols == other.cols
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn check_finite(&self, context: &'static str) -> Result<()> {
        if self.all_finite() {
            Ok(())
        } else {
            let bad = self.data.iter().position(|x| !x.is_finite()).unwrap_or(0);
            Err(UmcError::non_finite(
                context,
                format!("entry {bad} of {}x{} is {}", self.rows, self.cols, self.data[bad]),
            ))
        }
    }

    pub fn fill(&mut self, x: f64) {
        self.data.iter_mut().for_each(|v| *v = x);
    }

    pub fn scale_in_place(&mut self, s: f64) {
        self.data.iter_mut().for_each(|v| *v *= s);
    }

    pub fn add_assign(&mut self, other: &Matrix) {
        assert!(self.same_shape(other), "add_assign shape mismatch");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn sq_norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum()
    }

    /// `C = A . B` for `A: m x k`, `B: k x n`.
    ///
    /// ikj loops with unchecked indexing; the index arithmetic is bounded by
    /// the shape asserts at entry, and the oracle tests pin the kernel
    /// against a naive reference.
    pub fn matmul(&self, b: &Matrix) -> Matrix {
        assert_eq!(self.cols, b.rows, "matmul: {}x{} . {}x{}", self.rows, self.cols, b.rows, b.cols);
        let (m, k, n) = (self.rows, self.cols, b.cols);
        let mut out = vec![0.0; m * n];
        let ad = &self.data;
        let bd = &b.data;
        // SAFETY: i < m, l < k, j < n, so every flat index is inside the
        // corresponding buffer (lengths m*k, k*n, m*n).
        unsafe {
            for i in 0..m {
                let a_row = ad.get_unchecked(i * k..(i + 1) * k);
                let c_row = out.get_unchecked_mut(i * n..(i + 1) * n);
                for l in 0..k {
                    let x = *a_row.get_unchecked(l);
                    let b_row = bd.get_unchecked(l * n..(l + 1) * n);
                    for j in 0..n {
                        *c_row.get_unchecked_mut(j) += x * *b_row.get_unchecked(j);
                    }
                }
            }
        }
        Matrix { rows: m, cols: n, data: out }
    }

    /// `C = A^T . B` for `A: m x k`, `B: m x n` (result `k x n`).
    pub fn matmul_at_b(&self, b: &Matrix) -> Matrix {
        assert_eq!(self.rows, b.rows, "matmul_at_b: rows {} vs {}", self.rows, b.rows);
        let (m, k, n) = (self.rows, self.cols, b.cols);
        let mut out = vec![0.0; k * n];
        let ad = &self.data;
        let bd = &b.data;
        // SAFETY: bounded as in `matmul`; out has k*n entries and l < k.
        unsafe {
            for i in 0..m {
                let a_row = ad.get_unchecked(i * k..(i + 1) * k);
                let b_row = bd.get_unchecked(i * n..(i + 1) * n);
                for l in 0..k {
                    let x = *a_row.get_unchecked(l);
                    let c_row = out.get_unchecked_mut(l * n..(l + 1) * n);
                    for j in 0..n {
                        *c_row.get_unchecked_mut(j) += x * *b_row.get_unchecked(j);
                    }
                }
            }
        }
        Matrix { rows: k, cols: n, data: out }
    }

    /// `C = A . B^T` for `A: m x k`, `B: n x k` (result `m x n`).
    pub fn matmul_a_bt(&self, b: &Matrix) -> Matrix {
        assert_eq!(self.cols, b.cols, "matmul_a_bt: cols {} vs {}", self.cols, b.cols);
        let (m, k, n) = (self.rows, self.cols, b.rows);
        let mut out = vec![0.0; m * n];
        let ad = &self.data;
        let bd = &b.data;
        // SAFETY: bounded as in `matmul`; dot products read k entries of
        // each row.
        unsafe {
            for i in 0..m {
                let a_row = ad.get_unchecked(i * k..(i + 1) * k);
                let c_row = out.get_unchecked_mut(i * n..(i + 1) * n);
                for j in 0..n {
                    let b_row = bd.get_unchecked(j * k..(j + 1) * k);
                    let mut acc = 0.0;
                    for l in 0..k {
                        acc += *a_row.get_unchecked(l) * *b_row.get_unchecked(l);
                    }
                    *c_row.get_unchecked_mut(j) = acc;
                }
            }
        }
        Matrix { rows: m, cols: n, data: out }
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.set(j, i, self.get(i, j));
            }
        }
        out
    }

    /// Largest absolute difference against another matrix of the same shape.
    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        assert!(self.same_shape(other));
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_small() {
        let a = Matrix::from_vec(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let b = Matrix::from_vec(3, 2, vec![7.0, 8.0, 9.0, 10.0, 11.0, 12.0]);
        let c = a.matmul(&b);
        assert_eq!(c.as_slice(), &[58.0, 64.0, 139.0, 154.0]);
    }

    #[test]
    fn transposed_products_match_naive() {
        let a = Matrix::from_fn(4, 3, |i, j| (i * 3 + j) as f64 * 0.5 - 1.0);
        let b = Matrix::from_fn(4, 5, |i, j| (i + 2 * j) as f64 * 0.25);
        let atb = a.matmul_at_b(&b);
        let naive = a.transpose().matmul(&b);
        assert!(atb.max_abs_diff(&naive) < 1e-15);

        let c = Matrix::from_fn(5, 3, |i, j| (i as f64 - j as f64) * 0.3);
        let abt = a.matmul_a_bt(&c);
        let naive2 = a.matmul(&c.transpose());
        assert!(abt.max_abs_diff(&naive2) < 1e-15);
    }

    #[test]
    #[should_panic(expected = "matmul")]
    fn matmul_shape_mismatch_panics() {
        let a = Matrix::zeros(2, 3);
        let b = Matrix::zeros(2, 3);
        let _ = a.matmul(&b);
    }

    #[test]
    fn finite_check() {
        let mut m = Matrix::zeros(2, 2);
        assert!(m.check_finite("test").is_ok());
        m.set(1, 0, f64::NAN);
        assert!(m.check_finite("test").is_err());
    }
}
