//! Dense row-major helpers for the diagnostics.

use crate::error::{arg, Result};

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return arg("ragged rows");
            }
            data.extend_from_slice(r);
        }
        Ok(Self { rows: rows.len(), cols, data })
    }

    pub fn from_column(col: &[f64]) -> Self {
        Self { rows: col.len(), cols: 1, data: col.to_vec() }
    }

    /// An `n x 0` matrix.
    pub fn empty(rows: usize) -> Self {
        Self { rows, cols: 0, data: Vec::new() }
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn column(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self.get(r, c)).collect()
    }

    /// Horizontal concatenation.
    pub fn hstack(parts: &[&Matrix]) -> Result<Matrix> {
        let rows = parts.first().map_or(0, |m| m.rows);
        if parts.iter().any(|m| m.rows != rows) {
            return arg("hstack: row counts differ");
        }
        let cols: usize = parts.iter().map(|m| m.cols).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for m in parts {
                data.extend_from_slice(m.row(r));
            }
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn select_rows(&self, idx: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Matrix { rows: idx.len(), cols: self.cols, data }
    }
}

#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], rsa: isize, csa: isize, b: &[f64], rsb: isize, csb: isize, c: &mut [f64]) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: the asserted lengths cover every index touched with these strides.
    unsafe {
        matrixmultiply::dgemm(m, k, n, 1.0, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, 0.0, c.as_mut_ptr(), n as isize, 1);
    }
}

/// `A^T B`
pub fn mat_tn(a: &Matrix, b: &Matrix) -> Matrix {
    assert_eq!(a.rows, b.rows);
    let mut out = Matrix::zeros(a.cols, b.cols);
    gemm(a.cols, a.rows, b.cols, &a.data, 1, a.cols as isize, &b.data, b.cols as isize, 1, &mut out.data);
    out
}

/// `A B`
pub fn mat_nn(a: &Matrix, b: &Matrix) -> Matrix {
    assert_eq!(a.cols, b.rows);
    let mut out = Matrix::zeros(a.rows, b.cols);
    gemm(a.rows, a.cols, b.cols, &a.data, a.cols as isize, 1, &b.data, b.cols as isize, 1, &mut out.data);
    out
}

/// Solves `A X = B` for symmetric positive definite `A` by Cholesky.
pub fn cholesky_solve(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    let p = a.rows;
    if a.cols != p || b.rows != p {
        return arg("cholesky_solve: shape mismatch");
    }
    let mut l = vec![0.0; p * p];
    for i in 0..p {
        for j in 0..=i {
            let mut s = a.get(i, j);
            for k in 0..j {
                s -= l[i * p + k] * l[j * p + k];
            }
            if i == j {
                if !(s > 0.0) {
                    return arg("cholesky_solve: matrix is not positive definite");
                }
                l[i * p + i] = s.sqrt();
            } else {
                l[i * p + j] = s / l[j * p + j];
            }
        }
    }
    let mut x = b.clone();
    for c in 0..b.cols {
        for i in 0..p {
            let mut s = x.data[i * b.cols + c];
            for k in 0..i {
                s -= l[i * p + k] * x.data[k * b.cols + c];
            }
            x.data[i * b.cols + c] = s / l[i * p + i];
        }
        for i in (0..p).rev() {
            let mut s = x.data[i * b.cols + c];
            for k in i + 1..p {
                s -= l[k * p + i] * x.data[k * b.cols + c];
            }
            x.data[i * b.cols + c] = s / l[i * p + i];
        }
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn products_and_solve() {
        let a = Matrix { rows: 3, cols: 2, data: vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0] };
        let ata = mat_tn(&a, &a);
        assert_eq!(ata.data, vec![35.0, 44.0, 44.0, 56.0]);
        let x = Matrix { rows: 2, cols: 1, data: vec![1.0, -1.0] };
        let b = mat_nn(&ata, &x);
        let back = cholesky_solve(&ata, &b).unwrap();
        assert!((back.data[0] - 1.0).abs() < 1e-10 && (back.data[1] + 1.0).abs() < 1e-10);
    }
}
