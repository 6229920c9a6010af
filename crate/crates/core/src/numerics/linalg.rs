//! Small dense matrices and the SPD factorization used throughout the fitting code.
//!
//! Everything here is sized for mixed-model blocks: a handful of fixed effects,
//! one or two random effects and clusters of a few dozen rows. Storage is a flat
//! row-major `Vec<f64>`.

use std::fmt;
use std::ops::{Index, IndexMut};

use serde::{Deserialize, Serialize};

use super::NumericsError;

/// Relative symmetry tolerance accepted by [`cholesky`].
pub const SYMMETRY_TOL: f64 = 1e-12;
/// Pivots below `PIVOT_TOL * max(diag)` in magnitude are treated as zero.
pub const PIVOT_TOL: f64 = 1e-10;

/// Dense row-major matrix.
#[derive(Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Vec<f64>>", into = "Vec<Vec<f64>>")]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    /// Builds a matrix from a flat row-major buffer.
    pub fn from_row_slice(rows: usize, cols: usize, data: &[f64]) -> Result<Self, NumericsError> {
        if data.len() != rows * cols {
            return Err(NumericsError::DimensionMismatch(format!(
                "buffer of length {} cannot form a {}x{} matrix",
                data.len(),
                rows,
                cols
            )));
        }
        Ok(Self { rows, cols, data: data.to_vec() })
    }

    /// Builds a matrix from rows; every row must have the same length.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, NumericsError> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != cols {
                return Err(NumericsError::DimensionMismatch(format!(
                    "row {} has length {}, expected {}",
                    i,
                    r.len(),
                    cols
                )));
            }
            data.extend_from_slice(r);
        }
        Ok(Self { rows: rows.len(), cols, data })
    }

    pub fn diagonal(values: &[f64]) -> Self {
        let mut m = Self::zeros(values.len(), values.len());
        for (i, &v) in values.iter().enumerate() {
            m[(i, i)] = v;
        }
        m
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
    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self[(i, j)]).collect()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        (0..self.rows).map(|i| self.row(i).to_vec()).collect()
    }

    pub fn transpose(&self) -> Self {
        let mut t = Self::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t[(j, i)] = self[(i, j)];
            }
        }
        t
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix, NumericsError> {
        if self.cols != other.rows {
            return Err(NumericsError::DimensionMismatch(format!(
                "cannot multiply {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self[(i, k)];
                if a == 0.0 {
                    continue;
                }
                for j in 0..other.cols {
                    out.data[i * other.cols + j] += a * other.data[k * other.cols + j];
                }
            }
        }
        Ok(out)
    }

    pub fn mul_vec(&self, v: &[f64]) -> Result<Vec<f64>, NumericsError> {
        if v.len() != self.cols {
            return Err(NumericsError::DimensionMismatch(format!(
                "cannot multiply {}x{} matrix by vector of length {}",
                self.rows,
                self.cols,
                v.len()
            )));
        }
        Ok((0..self.rows).map(|i| dot(self.row(i), v)).collect())
    }

    /// `selfᵀ · self`.
    pub fn gram(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.cols);
        for r in 0..self.rows {
            let row = self.row(r);
            for i in 0..self.cols {
                for j in 0..=i {
                    out.data[i * self.cols + j] += row[i] * row[j];
                }
            }
        }
        out.mirror_lower();
        out
    }

    /// `selfᵀ · other` for matrices with the same row count.
    pub fn t_matmul(&self, other: &Matrix) -> Result<Matrix, NumericsError> {
        if self.rows != other.rows {
            return Err(NumericsError::DimensionMismatch(format!(
                "cannot form AᵀB with {} and {} rows",
                self.rows, other.rows
            )));
        }
        let mut out = Matrix::zeros(self.cols, other.cols);
        for r in 0..self.rows {
            let a = self.row(r);
            let b = other.row(r);
            for i in 0..self.cols {
                for j in 0..other.cols {
                    out.data[i * other.cols + j] += a[i] * b[j];
                }
            }
        }
        Ok(out)
    }

    /// `selfᵀ · v`.
    pub fn t_mul_vec(&self, v: &[f64]) -> Result<Vec<f64>, NumericsError> {
        if v.len() != self.rows {
            return Err(NumericsError::DimensionMismatch(format!(
                "cannot form Aᵀv with {} rows and vector of length {}",
                self.rows,
                v.len()
            )));
        }
        let mut out = vec![0.0; self.cols];
        for (r, &vr) in v.iter().enumerate() {
            for (o, &a) in out.iter_mut().zip(self.row(r)) {
                *o += a * vr;
            }
        }
        Ok(out)
    }

    /// Copies the strict lower triangle into the upper one.
    pub fn mirror_lower(&mut self) {
        for i in 0..self.rows {
            for j in 0..i {
                self.data[j * self.cols + i] = self.data[i * self.cols + j];
            }
        }
    }

    pub fn max_abs_diag(&self) -> f64 {
        (0..self.rows.min(self.cols)).map(|i| self[(i, i)].abs()).fold(0.0, f64::max)
    }

    pub fn is_symmetric(&self, rel_tol: f64) -> bool {
        if !self.is_square() {
            return false;
        }
        let scale = self.data.iter().fold(0.0_f64, |m, v| m.max(v.abs())).max(f64::MIN_POSITIVE);
        for i in 0..self.rows {
            for j in 0..i {
                if (self[(i, j)] - self[(j, i)]).abs() > rel_tol * scale {
                    return false;
                }
            }
        }
        true
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn scale(&self, s: f64) -> Matrix {
        Matrix { rows: self.rows, cols: self.cols, data: self.data.iter().map(|v| v * s).collect() }
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }
}

impl Index<(usize, usize)> for Matrix {
    type Output = f64;

    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &self.data[i * self.cols + j]
    }
}

impl IndexMut<(usize, usize)> for Matrix {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &mut self.data[i * self.cols + j]
    }
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_list().entries((0..self.rows).map(|i| self.row(i))).finish()
    }
}

impl TryFrom<Vec<Vec<f64>>> for Matrix {
    type Error = NumericsError;

    fn try_from(rows: Vec<Vec<f64>>) -> Result<Self, Self::Error> {
        Matrix::from_rows(&rows)
    }
}

impl From<Matrix> for Vec<Vec<f64>> {
    fn from(m: Matrix) -> Self {
        m.to_rows()
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Lower-triangular Cholesky factor `L` with `L Lᵀ = A`.
///
/// A positive semi-definite input whose pivot vanishes (within
/// `PIVOT_TOL * max(diag)`) gets a zero column and is flagged `semidefinite`;
/// such a factor can still generate correlated draws but cannot solve.
#[derive(Debug, Clone, PartialEq)]
pub struct Cholesky {
    l: Matrix,
    semidefinite: bool,
}

/// Factorizes a symmetric positive (semi-)definite matrix.
pub fn cholesky(m: &Matrix) -> Result<Cholesky, NumericsError> {
    if !m.is_square() {
        return Err(NumericsError::DimensionMismatch(format!(
            "cholesky needs a square matrix, got {}x{}",
            m.rows(),
            m.cols()
        )));
    }
    if !m.is_finite() {
        return Err(NumericsError::NonFinite);
    }
    if !m.is_symmetric(SYMMETRY_TOL) {
        return Err(NumericsError::NotSymmetric);
    }
    let n = m.rows();
    let tol = PIVOT_TOL * m.max_abs_diag();
    let mut l = Matrix::zeros(n, n);
    let mut semidefinite = false;
    for j in 0..n {
        let mut d = m[(j, j)];
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        if d < -tol {
            return Err(NumericsError::NotPositiveSemiDefinite { index: j, pivot: d });
        }
        if d <= tol {
            semidefinite = true;
            // Column stays zero; for a PSD input the remaining entries vanish too.
            continue;
        }
        let ljj = d.sqrt();
        l[(j, j)] = ljj;
        for i in (j + 1)..n {
            let mut s = m[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / ljj;
        }
    }
    Ok(Cholesky { l, semidefinite })
}

impl Cholesky {
    pub fn factor(&self) -> &Matrix {
        &self.l
    }

    pub fn into_factor(self) -> Matrix {
        self.l
    }

    pub fn dim(&self) -> usize {
        self.l.rows()
    }

    pub fn is_semidefinite(&self) -> bool {
        self.semidefinite
    }

    /// `log det A = 2 Σ log Lⱼⱼ`; `-inf` for a semi-definite factor.
    pub fn log_det(&self) -> f64 {
        if self.semidefinite {
            return f64::NEG_INFINITY;
        }
        2.0 * (0..self.dim()).map(|j| self.l[(j, j)].ln()).sum::<f64>()
    }

    fn require_definite(&self) -> Result<(), NumericsError> {
        if self.semidefinite {
            Err(NumericsError::Singular)
        } else {
            Ok(())
        }
    }

    /// Solves `L x = b`.
    pub fn forward(&self, b: &[f64]) -> Result<Vec<f64>, NumericsError> {
        self.require_definite()?;
        let n = self.dim();
        if b.len() != n {
            return Err(NumericsError::DimensionMismatch(format!(
                "rhs of length {} for a {}x{} factor",
                b.len(),
                n,
                n
            )));
        }
        let mut x = b.to_vec();
        for i in 0..n {
            let mut s = x[i];
            for k in 0..i {
                s -= self.l[(i, k)] * x[k];
            }
            x[i] = s / self.l[(i, i)];
        }
        Ok(x)
    }

    /// Solves `Lᵀ x = b`.
    pub fn backward(&self, b: &[f64]) -> Result<Vec<f64>, NumericsError> {
        self.require_definite()?;
        let n = self.dim();
        if b.len() != n {
            return Err(NumericsError::DimensionMismatch(format!(
                "rhs of length {} for a {}x{} factor",
                b.len(),
                n,
                n
            )));
        }
        let mut x = b.to_vec();
        for i in (0..n).rev() {
            let mut s = x[i];
            for k in (i + 1)..n {
                s -= self.l[(k, i)] * x[k];
            }
            x[i] = s / self.l[(i, i)];
        }
        Ok(x)
    }

    /// Solves `A x = b`.
    pub fn solve(&self, b: &[f64]) -> Result<Vec<f64>, NumericsError> {
        self.backward(&self.forward(b)?)
    }

    /// `bᵀ A⁻¹ b`.
    pub fn quad_form(&self, b: &[f64]) -> Result<f64, NumericsError> {
        let z = self.forward(b)?;
        Ok(dot(&z, &z))
    }

    pub fn inverse(&self) -> Result<Matrix, NumericsError> {
        self.require_definite()?;
        let n = self.dim();
        let mut inv = Matrix::zeros(n, n);
        let mut e = vec![0.0; n];
        for j in 0..n {
            e.iter_mut().for_each(|v| *v = 0.0);
            e[j] = 1.0;
            let col = self.solve(&e)?;
            for i in 0..n {
                inv[(i, j)] = col[i];
            }
        }
        Ok(inv)
    }

    /// Reassembles `L Lᵀ`.
    pub fn reconstruct(&self) -> Matrix {
        let n = self.dim();
        let mut out = Matrix::zeros(n, n);
        for i in 0..n {
            for j in 0..=i {
                let s: f64 = (0..=j).map(|k| self.l[(i, k)] * self.l[(j, k)]).sum();
                out[(i, j)] = s;
                out[(j, i)] = s;
            }
        }
        out
    }
}

/// A symmetric positive semi-definite matrix together with its factor.
#[derive(Debug, Clone, PartialEq)]
pub struct SpdMatrix {
    matrix: Matrix,
    factor: Cholesky,
}

impl SpdMatrix {
    pub fn new(matrix: Matrix) -> Result<Self, NumericsError> {
        let factor = cholesky(&matrix)?;
        Ok(Self { matrix, factor })
    }

    pub fn dim(&self) -> usize {
        self.matrix.rows()
    }

    pub fn matrix(&self) -> &Matrix {
        &self.matrix
    }

    pub fn cholesky(&self) -> &Cholesky {
        &self.factor
    }

    pub fn is_semidefinite(&self) -> bool {
        self.factor.is_semidefinite()
    }
}
