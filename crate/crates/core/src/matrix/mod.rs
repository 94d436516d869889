//! Dense row-major matrices over `f64` with the decomposition kernels the
//! aggregation pipeline needs: rank-revealing reduced QR, thin SVD via
//! one-sided Jacobi, symmetric eigendecomposition via cyclic Jacobi sweeps,
//! and SVD-based numerical rank.
//!
//! Everything here is deterministic: identical inputs produce bit-identical
//! outputs, with no dependence on thread count or allocation order.

mod decomp;

pub use decomp::{reduced_qr, sym_eig, thin_svd, EigResult, QrResult, SvdResult};

use thiserror::Error;

/// Default relative tolerance for rank decisions.
pub const DEFAULT_RANK_TOL: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MatrixError {
    #[error("non-finite entry at ({row}, {col})")]
    NonFiniteInput { row: usize, col: usize },
    #[error("matrix is not symmetric: relative asymmetry {asymmetry:.3e}")]
    NotSymmetric { asymmetry: f64 },
    #[error("dimension mismatch in {op}: left is {left_rows}x{left_cols}, right is {right_rows}x{right_cols}")]
    DimensionMismatch {
        op: &'static str,
        left_rows: usize,
        left_cols: usize,
        right_rows: usize,
        right_cols: usize,
    },
    #[error("shape {rows}x{cols} does not match data length {len}")]
    ShapeMismatch { rows: usize, cols: usize, len: usize },
    #[error("operation requires at least one column")]
    EmptyInput,
}

/// Dense real matrix, row-major storage.
///
/// Zero-sized shapes (`k = 0` bases, empty coordinate blocks) are legal; they
/// show up naturally as rank-zero decomposition results.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    /// Builds a matrix from row-major data, rejecting shape mismatches and
    /// non-finite entries.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, MatrixError> {
        if data.len() != rows * cols {
            return Err(MatrixError::ShapeMismatch { rows, cols, len: data.len() });
        }
        let m = Self { rows, cols, data };
        m.check_finite()?;
        Ok(m)
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.set(i, i, 1.0);
        }
        m
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

    /// Convenience constructor from nested rows; panics on ragged input.
    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let r = rows.len();
        let c = if r == 0 { 0 } else { rows[0].len() };
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend_from_slice(row);
        }
        Self { rows: r, cols: c, data }
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

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        debug_assert!(row < self.rows && col < self.cols);
        self.data[row * self.cols + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, value: f64) {
        debug_assert!(row < self.rows && col < self.cols);
        self.data[row * self.cols + col] = value;
    }

    #[inline]
    pub fn row(&self, row: usize) -> &[f64] {
        &self.data[row * self.cols..(row + 1) * self.cols]
    }

    pub fn check_finite(&self) -> Result<(), MatrixError> {
        for (idx, v) in self.data.iter().enumerate() {
            if !v.is_finite() {
                return Err(MatrixError::NonFiniteInput {
                    row: idx / self.cols.max(1),
                    col: idx % self.cols.max(1),
                });
            }
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Self {
        let mut out = Self::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.set(j, i, self.get(i, j));
            }
        }
        out
    }

    /// `self * other`, cache-friendly i-k-j loop order.
    pub fn matmul(&self, other: &Self) -> Self {
        assert_eq!(
            self.cols, other.rows,
            "matmul: {}x{} * {}x{}",
            self.rows, self.cols, other.rows, other.cols
        );
        let mut out = Self::zeros(self.rows, other.cols);
        let n = other.cols;
        for i in 0..self.rows {
            let out_row = &mut out.data[i * n..(i + 1) * n];
            for k in 0..self.cols {
                let a_ik = self.data[i * self.cols + k];
                if a_ik == 0.0 {
                    continue;
                }
                let b_row = &other.data[k * n..(k + 1) * n];
                for j in 0..n {
                    out_row[j] += a_ik * b_row[j];
                }
            }
        }
        out
    }

    /// `selfᵀ * other` without forming the transpose.
    pub fn matmul_transpose_self(&self, other: &Self) -> Self {
        assert_eq!(
            self.rows, other.rows,
            "matmul_transpose_self: {}x{} vs {}x{}",
            self.rows, self.cols, other.rows, other.cols
        );
        let mut out = Self::zeros(self.cols, other.cols);
        let n = other.cols;
        for k in 0..self.rows {
            let a_row = &self.data[k * self.cols..(k + 1) * self.cols];
            let b_row = &other.data[k * n..(k + 1) * n];
            for i in 0..self.cols {
                let a_ki = a_row[i];
                if a_ki == 0.0 {
                    continue;
                }
                let out_row = &mut out.data[i * n..(i + 1) * n];
                for j in 0..n {
                    out_row[j] += a_ki * b_row[j];
                }
            }
        }
        out
    }

    /// Gram matrix `selfᵀ * self`, exploiting symmetry.
    pub fn gram(&self) -> Self {
        let n = self.cols;
        let mut out = Self::zeros(n, n);
        for k in 0..self.rows {
            let row = &self.data[k * n..(k + 1) * n];
            for i in 0..n {
                let r_i = row[i];
                if r_i == 0.0 {
                    continue;
                }
                for j in i..n {
                    out.data[i * n + j] += r_i * row[j];
                }
            }
        }
        for i in 0..n {
            for j in 0..i {
                out.data[i * n + j] = out.data[j * n + i];
            }
        }
        out
    }

    pub fn add(&self, other: &Self) -> Self {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect();
        Self { rows: self.rows, cols: self.cols, data }
    }

    pub fn sub(&self, other: &Self) -> Self {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect();
        Self { rows: self.rows, cols: self.cols, data }
    }

    pub fn scale(&self, factor: f64) -> Self {
        let data = self.data.iter().map(|a| a * factor).collect();
        Self { rows: self.rows, cols: self.cols, data }
    }

    pub fn add_assign_scaled(&mut self, other: &Self, factor: f64) {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += factor * b;
        }
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0f64, |acc, v| acc.max(v.abs()))
    }

    pub fn col_norm(&self, col: usize) -> f64 {
        (0..self.rows).map(|i| self.get(i, col).powi(2)).sum::<f64>().sqrt()
    }

    pub fn dot_cols(&self, a: usize, b: usize) -> f64 {
        (0..self.rows).map(|i| self.get(i, a) * self.get(i, b)).sum()
    }

    /// New matrix made of the given columns, in the given order.
    pub fn select_columns(&self, cols: &[usize]) -> Self {
        let mut out = Self::zeros(self.rows, cols.len());
        for (jj, &j) in cols.iter().enumerate() {
            assert!(j < self.cols, "column index out of range");
            for i in 0..self.rows {
                out.set(i, jj, self.get(i, j));
            }
        }
        out
    }

    /// Horizontal concatenation `[self | other]`.
    pub fn hstack(&self, other: &Self) -> Self {
        assert_eq!(self.rows, other.rows, "hstack row mismatch");
        let mut out = Self::zeros(self.rows, self.cols + other.cols);
        for i in 0..self.rows {
            out.data[i * out.cols..i * out.cols + self.cols]
                .copy_from_slice(&self.data[i * self.cols..(i + 1) * self.cols]);
            out.data[i * out.cols + self.cols..(i + 1) * out.cols]
                .copy_from_slice(&other.data[i * other.cols..(i + 1) * other.cols]);
        }
        out
    }

    /// Scales column `col` in place.
    pub fn scale_column(&mut self, col: usize, factor: f64) {
        for i in 0..self.rows {
            let v = self.get(i, col);
            self.set(i, col, v * factor);
        }
    }

    /// Relative Frobenius distance `‖self − other‖ / max(‖other‖, floor)`.
    pub fn rel_frobenius_distance(&self, other: &Self) -> f64 {
        let denom = other.frobenius_norm().max(1e-300);
        self.sub(other).frobenius_norm() / denom
    }

    /// Frobenius distance from `selfᵀ·self` to the identity; zero-column
    /// matrices are vacuously orthonormal.
    pub fn orthonormality_defect(&self) -> f64 {
        if self.cols == 0 {
            return 0.0;
        }
        self.gram().sub(&Self::identity(self.cols)).frobenius_norm()
    }
}

/// Counts singular values above `rank_tol * sigma_max`; zero for the zero
/// matrix.
pub fn numerical_rank(m: &Matrix, rank_tol: f64) -> Result<usize, MatrixError> {
    assert!(rank_tol > 0.0, "rank_tol must be positive");
    let svd = thin_svd(m)?;
    let sigma_max = svd.sigma.first().copied().unwrap_or(0.0);
    if sigma_max <= 0.0 {
        return Ok(0);
    }
    Ok(svd.sigma.iter().filter(|&&s| s > rank_tol * sigma_max).count())
}
