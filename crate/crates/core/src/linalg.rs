//! Dense row-major matrices backed by `matrixmultiply` for the products.

use alloc::vec;
use alloc::vec::Vec;

#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    /// Panics if `data.len() != rows * cols`.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "matrix data length");
        Self { rows, cols, data }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
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

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let c = self.cols;
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }

    pub fn select_rows(&self, rows: &[usize]) -> Matrix {
        let mut out = Matrix::zeros(rows.len(), self.cols);
        for (k, &r) in rows.iter().enumerate() {
            out.row_mut(k).copy_from_slice(self.row(r));
        }
        out
    }

    /// `self * other`.
    pub fn matmul(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.cols, other.rows, "matmul shapes");
        let mut out = Matrix::zeros(self.rows, other.cols);
        gemm(1.0, self.view(), other.view(), 0.0, &mut out);
        out
    }

    /// `self * other^T`.
    pub fn matmul_t(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.cols, other.cols, "matmul_t shapes");
        let mut out = Matrix::zeros(self.rows, other.rows);
        gemm(1.0, self.view(), other.view().t(), 0.0, &mut out);
        out
    }

    pub fn matvec(&self, v: &[f64]) -> Vec<f64> {
        assert_eq!(self.cols, v.len(), "matvec shapes");
        (0..self.rows).map(|i| dot(self.row(i), v)).collect()
    }

    /// `v^T * self`.
    pub fn vecmat(&self, v: &[f64]) -> Vec<f64> {
        assert_eq!(self.rows, v.len(), "vecmat shapes");
        let mut out = vec![0.0; self.cols];
        for (i, &vi) in v.iter().enumerate() {
            if vi != 0.0 {
                axpy(vi, self.row(i), &mut out);
            }
        }
        out
    }

    pub fn sum_sq(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum()
    }

    pub fn view(&self) -> MatView<'_> {
        MatView { data: &self.data, rows: self.rows, cols: self.cols, rs: self.cols as isize, cs: 1 }
    }
}

/// Strided read-only view used to feed `gemm` without copying.
#[derive(Clone, Copy, Debug)]
pub struct MatView<'a> {
    data: &'a [f64],
    rows: usize,
    cols: usize,
    rs: isize,
    cs: isize,
}

impl<'a> MatView<'a> {
    pub fn t(self) -> MatView<'a> {
        MatView { data: self.data, rows: self.cols, cols: self.rows, rs: self.cs, cs: self.rs }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }
}

/// `c <- alpha * a * b + beta * c`.
pub fn gemm(alpha: f64, a: MatView<'_>, b: MatView<'_>, beta: f64, c: &mut Matrix) {
    assert_eq!(a.cols, b.rows, "gemm inner dimension");
    assert_eq!((c.rows, c.cols), (a.rows, b.cols), "gemm output shape");
    if a.rows == 0 || b.cols == 0 {
        return;
    }
    if a.cols == 0 {
        for x in c.data.iter_mut() {
            *x *= beta;
        }
        return;
    }
    // SAFETY: the views cover their full extents (checked by construction
    // from owned matrices), and `c` is an exclusively borrowed dense buffer of
    // shape `a.rows x b.cols`.
    unsafe {
        matrixmultiply::dgemm(
            a.rows,
            a.cols,
            b.cols,
            alpha,
            a.data.as_ptr(),
            a.rs,
            a.cs,
            b.data.as_ptr(),
            b.rs,
            b.cs,
            beta,
            c.data.as_mut_ptr(),
            c.cols as isize,
            1,
        );
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

pub fn norm2(v: &[f64]) -> f64 {
    crate::math::sqrt(dot(v, v))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &Matrix, b: &Matrix) -> Matrix {
        Matrix::from_fn(a.rows(), b.cols(), |i, j| (0..a.cols()).map(|k| a.get(i, k) * b.get(k, j)).sum())
    }

    #[test]
    fn products_match_naive_loops() {
        let a = Matrix::from_fn(5, 7, |i, j| (i as f64 + 1.0) * 0.3 - j as f64 * 0.7);
        let b = Matrix::from_fn(7, 3, |i, j| (i * j) as f64 * 0.1 + 1.0);
        let c = a.matmul(&b);
        let expect = naive(&a, &b);
        for (x, y) in c.as_slice().iter().zip(expect.as_slice()) {
            assert!((x - y).abs() < 1e-12);
        }
        let bt = b.transpose();
        assert_eq!(a.matmul_t(&bt).as_slice().len(), 15);
        for (x, y) in a.matmul_t(&bt).as_slice().iter().zip(expect.as_slice()) {
            assert!((x - y).abs() < 1e-12);
        }
        let v = [1.0, -2.0, 0.5, 0.0, 3.0];
        let left = a.vecmat(&v);
        let via_t = a.transpose().matvec(&v);
        assert_eq!(left.len(), via_t.len());
        for (x, y) in left.iter().zip(&via_t) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}
