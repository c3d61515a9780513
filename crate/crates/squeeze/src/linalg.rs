//! Dense row-major f64 matrices and the symmetric positive-definite solves
//! used by the calibration path.
//!
//! Weights and activations persist as f32; everything numerical in between
//! (Hessians, salience, compensation) runs in f64.

use crate::error::{Error, Result};

/// Dense row-major matrix of f64.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len(), "matrix data length mismatch");
        Matrix { rows, cols, data }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        let c = self.cols;
        &mut self.data[r * c..(r + 1) * c]
    }

    /// `self (m×k) · otherᵀ (n×k) → m×n`. The layer forward pass `Y = X·Wᵀ`
    /// with W stored row-major makes the transposed operand the cheap one:
    /// both inner loops run over contiguous rows.
    pub fn matmul_nt(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.cols, other.cols, "inner dimension mismatch");
        let mut out = Matrix::zeros(self.rows, other.rows);
        for i in 0..self.rows {
            let a = self.row(i);
            for j in 0..other.rows {
                let b = other.row(j);
                let mut acc = 0.0;
                for k in 0..self.cols {
                    acc += a[k] * b[k];
                }
                out.data[i * other.rows + j] = acc;
            }
        }
        out
    }

    /// `selfᵀ · self` for an N×d matrix, yielding d×d.
    pub fn gram(&self) -> Matrix {
        let d = self.cols;
        let mut out = Matrix::zeros(d, d);
        for t in 0..self.rows {
            let x = self.row(t);
            for i in 0..d {
                let xi = x[i];
                if xi == 0.0 {
                    continue;
                }
                let row = &mut out.data[i * d..(i + 1) * d];
                for j in 0..d {
                    row[j] += xi * x[j];
                }
            }
        }
        out
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        assert_eq!(self.data.len(), other.data.len());
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Little-endian byte image of the payload, used for digests.
    pub fn to_le_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.data.len() * 8);
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }
}

/// Cholesky factor of a symmetric positive-definite matrix.
///
/// Pivots at or below `PIVOT_TOL · max(diag)` are treated as a failed
/// factorization so that rank-deficient inputs surface as
/// [`Error::NotPositiveDefinite`] instead of producing a garbage inverse.
#[derive(Debug)]
pub struct Cholesky {
    n: usize,
    // lower-triangular factor, row-major full storage
    l: Vec<f64>,
}

const PIVOT_TOL: f64 = 1e-10;

impl Cholesky {
    pub fn factor(a: &Matrix, damping: f64) -> Result<Self> {
        assert_eq!(a.rows(), a.cols(), "Cholesky needs a square matrix");
        let n = a.rows();
        let mut l = vec![0.0f64; n * n];
        let mut diag_max: f64 = 0.0;
        for i in 0..n {
            diag_max = diag_max.max((a.get(i, i) + damping).abs());
        }
        let tol = PIVOT_TOL * diag_max.max(1e-300);
        for j in 0..n {
            let mut pivot = a.get(j, j) + damping;
            for k in 0..j {
                pivot -= l[j * n + k] * l[j * n + k];
            }
            if pivot <= tol {
                return Err(Error::NotPositiveDefinite {
                    column: j,
                    pivot,
                    damping,
                });
            }
            let ljj = pivot.sqrt();
            l[j * n + j] = ljj;
            for i in (j + 1)..n {
                let mut v = a.get(i, j) + if i == j { damping } else { 0.0 };
                for k in 0..j {
                    v -= l[i * n + k] * l[j * n + k];
                }
                l[i * n + j] = v / ljj;
            }
        }
        Ok(Cholesky { n, l })
    }

    /// Solve `(L·Lᵀ)·x = b` in place.
    #[allow(clippy::needless_range_loop)] // indexed form mirrors the recurrence
    pub fn solve_in_place(&self, b: &mut [f64]) {
        let n = self.n;
        assert_eq!(b.len(), n);
        // forward: L·y = b
        for i in 0..n {
            let mut v = b[i];
            for k in 0..i {
                v -= self.l[i * n + k] * b[k];
            }
            b[i] = v / self.l[i * n + i];
        }
        // backward: Lᵀ·x = y
        for i in (0..n).rev() {
            let mut v = b[i];
            for k in (i + 1)..n {
                v -= self.l[k * n + i] * b[k];
            }
            b[i] = v / self.l[i * n + i];
        }
    }

    /// Full inverse, column by column.
    pub fn inverse(&self) -> Matrix {
        let n = self.n;
        let mut inv = Matrix::zeros(n, n);
        let mut col = vec![0.0f64; n];
        for j in 0..n {
            col.iter_mut().for_each(|v| *v = 0.0);
            col[j] = 1.0;
            self.solve_in_place(&mut col);
            for (i, &v) in col.iter().enumerate() {
                inv.set(i, j, v);
            }
        }
        // symmetrize: the exact inverse is symmetric, the solve is not
        for i in 0..n {
            for j in 0..i {
                let v = 0.5 * (inv.get(i, j) + inv.get(j, i));
                inv.set(i, j, v);
                inv.set(j, i, v);
            }
        }
        inv
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_nt_small() {
        // X = [[1,2],[3,4]], W = [[1,0],[0,1],[1,1]]; Y = X·Wᵀ is 2×3
        let x = Matrix::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0]);
        let w = Matrix::from_vec(3, 2, vec![1.0, 0.0, 0.0, 1.0, 1.0, 1.0]);
        let y = x.matmul_nt(&w);
        assert_eq!(y.data(), &[1.0, 2.0, 3.0, 3.0, 4.0, 7.0]);
    }

    #[test]
    fn gram_matches_explicit_product() {
        let x = Matrix::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0]);
        let g = x.gram();
        assert_eq!(g.data(), &[10.0, 14.0, 14.0, 20.0]);
    }

    #[test]
    fn cholesky_inverse_2x2() {
        let a = Matrix::from_vec(2, 2, vec![20.0, 28.0, 28.0, 40.0]);
        let inv = Cholesky::factor(&a, 0.0).unwrap().inverse();
        // closed form: det = 16, inv = [[40,-28],[-28,20]]/16
        let expect = [2.5, -1.75, -1.75, 1.25];
        for (got, want) in inv.data().iter().zip(expect) {
            assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        }
    }

    #[test]
    fn cholesky_rejects_singular() {
        // rank-1: [[1,2],[2,4]]
        let a = Matrix::from_vec(2, 2, vec![1.0, 2.0, 2.0, 4.0]);
        let err = Cholesky::factor(&a, 0.0).unwrap_err();
        assert!(matches!(err, Error::NotPositiveDefinite { .. }));
        // damping rescues it
        assert!(Cholesky::factor(&a, 0.05).is_ok());
    }
}
