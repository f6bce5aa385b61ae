//! Small dense matrix kernels: Cholesky solves, cyclic Jacobi eigenvalues,
//! traces and sample cross-covariances.
//!
//! Matrices here are tiny (d is at most a few dozen), so everything is a
//! straightforward row-major `Vec<f64>`.

use serde::{Deserialize, Serialize};
use std::ops::{Index, IndexMut};

use crate::error::{Error, Result};

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Vec<f64>>", into = "Vec<Vec<f64>>")]
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

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_diag(diag: &[f64]) -> Self {
        let mut m = Matrix::zeros(diag.len(), diag.len());
        for (i, &v) in diag.iter().enumerate() {
            m[(i, i)] = v;
        }
        m
    }

    /// Builds a matrix from row slices. All rows must have equal length.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let nrows = rows.len();
        if nrows == 0 {
            return Err(Error::EmptyInput);
        }
        let ncols = rows[0].as_ref().len();
        let mut data = Vec::with_capacity(nrows * ncols);
        for r in rows {
            let r = r.as_ref();
            if r.len() != ncols {
                return Err(Error::DimensionMismatch {
                    expected: ncols,
                    got: r.len(),
                });
            }
            data.extend_from_slice(r);
        }
        Ok(Matrix {
            rows: nrows,
            cols: ncols,
            data,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        (0..self.rows).map(|i| self.row(i).to_vec()).collect()
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t[(j, i)] = self[(i, j)];
            }
        }
        t
    }

    pub fn matvec(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.cols {
            return Err(Error::DimensionMismatch {
                expected: self.cols,
                got: v.len(),
            });
        }
        Ok((0..self.rows)
            .map(|i| self.row(i).iter().zip(v).map(|(a, b)| a * b).sum())
            .collect())
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::DimensionMismatch {
                expected: self.cols,
                got: other.rows,
            });
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self[(i, k)];
                if a == 0.0 {
                    continue;
                }
                for j in 0..other.cols {
                    out[(i, j)] += a * other[(k, j)];
                }
            }
        }
        Ok(out)
    }

    fn zip_with(&self, other: &Matrix, f: impl Fn(f64, f64) -> f64) -> Result<Matrix> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(Error::DimensionMismatch {
                expected: self.rows * self.cols,
                got: other.rows * other.cols,
            });
        }
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, |a, b| a - b)
    }

    pub fn scale(&self, s: f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * s).collect(),
        }
    }

    /// Sum of the diagonal, accumulated left to right.
    pub fn trace(&self) -> f64 {
        let n = self.rows.min(self.cols);
        let mut t = 0.0;
        for i in 0..n {
            t += self[(i, i)];
        }
        t
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Returns `(A + A^T) / 2`.
    pub fn symmetrized(&self) -> Matrix {
        let mut s = self.clone();
        for i in 0..self.rows {
            for j in 0..i {
                let v = 0.5 * (self[(i, j)] + self[(j, i)]);
                s[(i, j)] = v;
                s[(j, i)] = v;
            }
        }
        s
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }
}

impl Index<(usize, usize)> for Matrix {
    type Output = f64;

    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.cols + j]
    }
}

impl IndexMut<(usize, usize)> for Matrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.data[i * self.cols + j]
    }
}

impl TryFrom<Vec<Vec<f64>>> for Matrix {
    type Error = Error;

    fn try_from(rows: Vec<Vec<f64>>) -> Result<Self> {
        Matrix::from_rows(&rows)
    }
}

impl From<Matrix> for Vec<Vec<f64>> {
    fn from(m: Matrix) -> Self {
        m.to_rows()
    }
}

/// Symmetric square matrix. Symmetry is checked on construction to within
/// `1e-12` relative to the largest entry magnitude.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Matrix", into = "Matrix")]
pub struct SymMatrix(Matrix);

const SYMMETRY_TOL: f64 = 1e-12;

impl SymMatrix {
    pub fn new(m: Matrix) -> Result<Self> {
        if !m.is_square() {
            return Err(Error::DimensionMismatch {
                expected: m.rows(),
                got: m.cols(),
            });
        }
        if m.rows() == 0 {
            return Err(Error::EmptyInput);
        }
        let scale = m.max_abs().max(f64::MIN_POSITIVE);
        for i in 0..m.rows() {
            for j in 0..i {
                let asym = (m[(i, j)] - m[(j, i)]).abs();
                if asym > SYMMETRY_TOL * scale {
                    return Err(Error::NotSymmetric {
                        row: i,
                        col: j,
                        asym,
                    });
                }
            }
        }
        Ok(SymMatrix(m))
    }

    /// Symmetrizes `m` instead of rejecting small asymmetries.
    pub fn from_symmetrized(m: &Matrix) -> Result<Self> {
        SymMatrix::new(m.symmetrized())
    }

    pub fn identity(n: usize) -> Self {
        SymMatrix(Matrix::identity(n))
    }

    pub fn from_diag(diag: &[f64]) -> Self {
        SymMatrix(Matrix::from_diag(diag))
    }

    pub fn dim(&self) -> usize {
        self.0.rows()
    }

    pub fn matrix(&self) -> &Matrix {
        &self.0
    }

    pub fn into_matrix(self) -> Matrix {
        self.0
    }

    pub fn trace(&self) -> f64 {
        self.0.trace()
    }
}

impl Index<(usize, usize)> for SymMatrix {
    type Output = f64;

    fn index(&self, ij: (usize, usize)) -> &f64 {
        &self.0[ij]
    }
}

impl TryFrom<Matrix> for SymMatrix {
    type Error = Error;

    fn try_from(m: Matrix) -> Result<Self> {
        SymMatrix::new(m)
    }
}

impl From<SymMatrix> for Matrix {
    fn from(s: SymMatrix) -> Self {
        s.0
    }
}

/// Lower-triangular Cholesky factor `L` with `M = L L^T`.
#[derive(Debug, Clone)]
pub struct Cholesky {
    l: Matrix,
}

impl Cholesky {
    /// Fails with `NotPositiveDefinite` on the first pivot that is not
    /// strictly positive.
    pub fn factor(m: &SymMatrix) -> Result<Self> {
        Self::factor_rel(m, 0.0)
    }

    /// Like [`Cholesky::factor`] but also rejects pivots at or below
    /// `rel_tol * M_jj`, which catches matrices that are singular up to
    /// rounding.
    pub fn factor_rel(m: &SymMatrix, rel_tol: f64) -> Result<Self> {
        let n = m.dim();
        let mut l = Matrix::zeros(n, n);
        for j in 0..n {
            let mut pivot = m[(j, j)];
            for k in 0..j {
                pivot -= l[(j, k)] * l[(j, k)];
            }
            if !(pivot > 0.0) || pivot <= rel_tol * m[(j, j)] {
                return Err(Error::NotPositiveDefinite { index: j, pivot });
            }
            let ljj = pivot.sqrt();
            l[(j, j)] = ljj;
            for i in j + 1..n {
                let mut s = m[(i, j)];
                for k in 0..j {
                    s -= l[(i, k)] * l[(j, k)];
                }
                l[(i, j)] = s / ljj;
            }
        }
        Ok(Cholesky { l })
    }

    pub fn dim(&self) -> usize {
        self.l.rows()
    }

    pub fn solve(&self, b: &[f64]) -> Result<Vec<f64>> {
        let n = self.dim();
        if b.len() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                got: b.len(),
            });
        }
        let l = &self.l;
        let mut y = b.to_vec();
        for i in 0..n {
            let mut s = y[i];
            for k in 0..i {
                s -= l[(i, k)] * y[k];
            }
            y[i] = s / l[(i, i)];
        }
        for i in (0..n).rev() {
            let mut s = y[i];
            for k in i + 1..n {
                s -= l[(k, i)] * y[k];
            }
            y[i] = s / l[(i, i)];
        }
        Ok(y)
    }

    /// Solves `M X = B` column by column.
    pub fn solve_matrix(&self, b: &Matrix) -> Result<Matrix> {
        if b.rows() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: b.rows(),
            });
        }
        let mut x = Matrix::zeros(b.rows(), b.cols());
        let mut col = vec![0.0; b.rows()];
        for j in 0..b.cols() {
            for i in 0..b.rows() {
                col[i] = b[(i, j)];
            }
            let sol = self.solve(&col)?;
            for i in 0..b.rows() {
                x[(i, j)] = sol[i];
            }
        }
        Ok(x)
    }
}

/// Solves `M v = b` for symmetric positive definite `M` via Cholesky.
pub fn spd_solve(m: &SymMatrix, b: &[f64]) -> Result<Vec<f64>> {
    if b.len() != m.dim() {
        return Err(Error::DimensionMismatch {
            expected: m.dim(),
            got: b.len(),
        });
    }
    Cholesky::factor(m)?.solve(b)
}

/// Eigenvalues of a symmetric matrix in descending order, by cyclic Jacobi
/// rotations. Sweeps stop once every off-diagonal entry is below
/// `1e-12 * ||M||_F`.
pub fn sym_eigvals(m: &SymMatrix) -> Vec<f64> {
    let n = m.dim();
    let mut a = m.matrix().clone();
    let tol = 1e-12 * a.frobenius_norm();
    const MAX_SWEEPS: usize = 100;

    for _ in 0..MAX_SWEEPS {
        let mut off = 0.0_f64;
        for i in 0..n {
            for j in 0..i {
                off = off.max(a[(i, j)].abs());
            }
        }
        if off <= tol {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[(p, q)];
                if apq.abs() <= tol {
                    continue;
                }
                let app = a[(p, p)];
                let aqq = a[(q, q)];
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[(k, p)];
                    let akq = a[(k, q)];
                    a[(k, p)] = c * akp - s * akq;
                    a[(k, q)] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[(p, k)];
                    let aqk = a[(q, k)];
                    a[(p, k)] = c * apk - s * aqk;
                    a[(q, k)] = s * apk + c * aqk;
                }
                a[(p, q)] = 0.0;
                a[(q, p)] = 0.0;
            }
        }
    }

    let mut eig: Vec<f64> = (0..n).map(|i| a[(i, i)]).collect();
    eig.sort_by(|x, y| y.total_cmp(x));
    eig
}

pub fn trace(m: &SymMatrix) -> f64 {
    m.trace()
}

/// Unbiased cross-covariance `1/(n-1) sum (s_i - s̄)(o_i - ō)^T` between two
/// paired sample lists.
pub fn sample_cov<A: AsRef<[f64]>, B: AsRef<[f64]>>(samples: &[A], other: &[B]) -> Result<Matrix> {
    let n = samples.len();
    if other.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: other.len(),
        });
    }
    if n < 2 {
        return Err(Error::InsufficientSamples { needed: 2, got: n });
    }
    let da = samples[0].as_ref().len();
    let db = other[0].as_ref().len();
    let mean_a = column_mean(samples, da)?;
    let mean_b = column_mean(other, db)?;

    let mut cov = Matrix::zeros(da, db);
    for (a, b) in samples.iter().zip(other) {
        let (a, b) = (a.as_ref(), b.as_ref());
        for i in 0..da {
            let ai = a[i] - mean_a[i];
            for j in 0..db {
                cov[(i, j)] += ai * (b[j] - mean_b[j]);
            }
        }
    }
    Ok(cov.scale(1.0 / (n - 1) as f64))
}

pub(crate) fn column_mean<A: AsRef<[f64]>>(samples: &[A], dim: usize) -> Result<Vec<f64>> {
    let mut mean = vec![0.0; dim];
    for s in samples {
        let s = s.as_ref();
        if s.len() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: s.len(),
            });
        }
        for (m, v) in mean.iter_mut().zip(s) {
            *m += v;
        }
    }
    let inv = 1.0 / samples.len() as f64;
    mean.iter_mut().for_each(|m| *m *= inv);
    Ok(mean)
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}
