//! Dense symmetric-matrix primitives shared by every estimator.
//!
//! Covariance-like inputs are wrapped in [`SymMatrix`], which symmetrizes on
//! construction as `(A + Aᵀ)/2`. Iterative updates accumulate rounding
//! asymmetry and the symmetric eigensolver assumes exact symmetry.

use std::ops::Index;

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

/// Relative floor of the positive-definiteness test: the smallest eigenvalue
/// must exceed `PD_RELATIVE_TOL * max(1, largest eigenvalue)`.
pub const PD_RELATIVE_TOL: f64 = 1e-12;

const EIGEN_MAX_ITER: usize = 10_000;

/// `sign(x) * max(|x| - tau, 0)`.
#[inline]
pub fn soft_threshold(x: f64, tau: f64) -> f64 {
    debug_assert!(tau >= 0.0);
    let shrunk = x.abs() - tau;
    if shrunk > 0.0 {
        shrunk.copysign(x)
    } else {
        0.0
    }
}

/// Dense symmetric matrix, stored as a full `nalgebra` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SymMatrix(DMatrix<f64>);

impl SymMatrix {
    /// Wraps a square matrix, replacing it by `(A + Aᵀ)/2`.
    pub fn new(matrix: DMatrix<f64>) -> Result<Self> {
        if matrix.nrows() != matrix.ncols() {
            return Err(Error::DimensionMismatch {
                expected: "square matrix".into(),
                got: format!("{}x{}", matrix.nrows(), matrix.ncols()),
            });
        }
        if matrix.nrows() == 0 {
            return Err(Error::InvalidArgument("matrix dimension must be >= 1".into()));
        }
        Ok(Self::symmetrized(matrix))
    }

    /// Same as [`SymMatrix::new`] for callers that already know the shape is
    /// square and non-empty.
    pub(crate) fn symmetrized(mut m: DMatrix<f64>) -> Self {
        let n = m.nrows();
        for i in 0..n {
            for j in (i + 1)..n {
                let avg = 0.5 * (m[(i, j)] + m[(j, i)]);
                m[(i, j)] = avg;
                m[(j, i)] = avg;
            }
        }
        SymMatrix(m)
    }

    pub fn identity(dim: usize) -> Self {
        SymMatrix(DMatrix::identity(dim, dim))
    }

    pub fn from_diagonal(diag: &DVector<f64>) -> Self {
        SymMatrix(DMatrix::from_diagonal(diag))
    }

    /// Builds a matrix from the upper triangle; `f(i, j)` is called for `i <= j`.
    pub fn from_upper_fn(dim: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut m = DMatrix::zeros(dim, dim);
        for i in 0..dim {
            for j in i..dim {
                let v = f(i, j);
                m[(i, j)] = v;
                m[(j, i)] = v;
            }
        }
        SymMatrix(m)
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn as_matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_inner(self) -> DMatrix<f64> {
        self.0
    }

    pub fn diagonal(&self) -> DVector<f64> {
        self.0.diagonal()
    }

    pub fn trace(&self) -> f64 {
        self.0.trace()
    }

    pub fn scale(&self, c: f64) -> Self {
        SymMatrix(&self.0 * c)
    }

    pub fn add(&self, other: &SymMatrix) -> Self {
        SymMatrix(&self.0 + &other.0)
    }

    pub fn sub(&self, other: &SymMatrix) -> Self {
        SymMatrix(&self.0 - &other.0)
    }

    /// `D A D` for a diagonal scaling `D = diag(d)`.
    pub fn congruence_diag(&self, d: &DVector<f64>) -> Self {
        Self::from_upper_fn(self.dim(), |i, j| d[i] * self.0[(i, j)] * d[j])
    }

    /// Symmetric permutation `P A Pᵀ` with `out[(i, j)] = A[(perm[i], perm[j])]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let n = self.dim();
        SymMatrix(DMatrix::from_fn(n, n, |i, j| self.0[(perm[i], perm[j])]))
    }

    pub fn max_abs_diff(&self, other: &SymMatrix) -> f64 {
        max_abs_diff(&self.0, &other.0)
    }

    /// Eigendecomposition with eigenvalues sorted non-increasing.
    pub fn eigen(&self) -> Result<EigenPair> {
        let eig = SymmetricEigen::try_new(self.0.clone(), f64::EPSILON, EIGEN_MAX_ITER)
            .ok_or(Error::EigenNonConvergence { iterations: EIGEN_MAX_ITER })?;
        let n = self.dim();
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
        let values = DVector::from_iterator(n, order.iter().map(|&k| eig.eigenvalues[k]));
        let vectors = DMatrix::from_fn(n, n, |i, j| eig.eigenvectors[(i, order[j])]);
        Ok(EigenPair { values, vectors })
    }

    /// Eigenvalues only, sorted non-increasing.
    pub fn eigenvalues(&self) -> Result<DVector<f64>> {
        Ok(self.eigen()?.values)
    }

    /// Relative positive-definiteness test.
    pub fn check_positive_definite(&self) -> Result<()> {
        let values = self.eigenvalues()?;
        let max = values[0];
        let min = values[values.len() - 1];
        if min > PD_RELATIVE_TOL * max.max(1.0) && min.is_finite() {
            Ok(())
        } else {
            Err(Error::NotPositiveDefinite { min_eigenvalue: min })
        }
    }

    pub fn is_positive_definite(&self) -> bool {
        self.check_positive_definite().is_ok()
    }

    /// Inverse of a positive-definite matrix (Cholesky, eigen fallback).
    pub fn inverse_pd(&self) -> Result<SymMatrix> {
        self.check_positive_definite()?;
        if let Some(chol) = self.0.clone().cholesky() {
            return Ok(SymMatrix::symmetrized(chol.inverse()));
        }
        let eig = self.eigen()?;
        Ok(eig.reconstruct_with(|v| 1.0 / v))
    }

    /// Moore-Penrose pseudo-inverse. Eigenvalues below
    /// `dim * eps * max|eigenvalue|` are treated as zero.
    pub fn pseudo_inverse(&self) -> Result<SymMatrix> {
        let eig = self.eigen()?;
        let scale = eig.values.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
        let cutoff = self.dim() as f64 * f64::EPSILON * scale;
        Ok(eig.reconstruct_with(|v| if v.abs() > cutoff { 1.0 / v } else { 0.0 }))
    }

    /// `log det` of a positive-definite matrix.
    pub fn log_det_pd(&self) -> Result<f64> {
        match self.0.clone().cholesky() {
            Some(chol) => Ok(2.0 * chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>()),
            None => {
                let values = self.eigenvalues()?;
                let min = values[values.len() - 1];
                if min <= 0.0 {
                    return Err(Error::NotPositiveDefinite { min_eigenvalue: min });
                }
                Ok(values.iter().map(|v| v.ln()).sum())
            }
        }
    }

    /// Solves `A x = b` for positive-definite `A`.
    pub fn solve_pd(&self, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        match self.0.clone().cholesky() {
            Some(chol) => Ok(chol.solve(b)),
            None => Ok(self.inverse_pd()?.as_matrix() * b),
        }
    }
}

impl Index<(usize, usize)> for SymMatrix {
    type Output = f64;

    fn index(&self, idx: (usize, usize)) -> &f64 {
        &self.0[idx]
    }
}

/// Eigenvalues (non-increasing) and the matching orthonormal eigenvectors
/// stored column-wise.
#[derive(Debug, Clone)]
pub struct EigenPair {
    pub values: DVector<f64>,
    pub vectors: DMatrix<f64>,
}

impl EigenPair {
    /// `Γ diag(f(π)) Γᵀ`.
    pub fn reconstruct_with(&self, f: impl Fn(f64) -> f64) -> SymMatrix {
        let mapped = self.values.map(f);
        let scaled = DMatrix::from_fn(self.vectors.nrows(), self.vectors.ncols(), |i, j| {
            self.vectors[(i, j)] * mapped[j]
        });
        SymMatrix::symmetrized(scaled * self.vectors.transpose())
    }

    pub fn reconstruct(&self) -> SymMatrix {
        self.reconstruct_with(|v| v)
    }
}

pub fn frobenius_norm(a: &SymMatrix) -> f64 {
    a.as_matrix().norm()
}

/// Largest absolute eigenvalue of a symmetric matrix.
pub fn spectral_norm(a: &SymMatrix) -> Result<f64> {
    let values = a.eigenvalues()?;
    Ok(values[0].abs().max(values[values.len() - 1].abs()))
}

/// Largest singular value of a rectangular matrix, through the smaller Gram
/// matrix.
pub fn spectral_norm_rect(a: &DMatrix<f64>) -> Result<f64> {
    if a.is_empty() {
        return Ok(0.0);
    }
    let gram = if a.nrows() >= a.ncols() { a.transpose() * a } else { a * a.transpose() };
    let top = SymMatrix::symmetrized(gram).eigenvalues()?[0];
    Ok(top.max(0.0).sqrt())
}

/// `N^{-1/2} ‖Σ^{-1/2} A Σ^{-1/2}‖_F`, the loss norm that stays bounded when
/// `Σ` has diverging eigenvalues.
pub fn weighted_quadratic_norm(a: &SymMatrix, sigma: &SymMatrix) -> Result<f64> {
    if a.dim() != sigma.dim() {
        return Err(Error::DimensionMismatch {
            expected: format!("{0}x{0}", sigma.dim()),
            got: format!("{0}x{0}", a.dim()),
        });
    }
    sigma.check_positive_definite()?;
    let inv_root = sigma.eigen()?.reconstruct_with(|v| 1.0 / v.sqrt());
    let inner = inv_root.as_matrix() * a.as_matrix() * inv_root.as_matrix();
    Ok(inner.norm() / (a.dim() as f64).sqrt())
}

/// `(ΛΛᵀ + Σ_u)^{-1}` given `Σ_u^{-1}`, through the `r × r` system
/// `I_r + Λᵀ Σ_u^{-1} Λ`.
pub fn woodbury_precision(lambda: &DMatrix<f64>, sigma_u_inv: &SymMatrix) -> Result<SymMatrix> {
    let n = sigma_u_inv.dim();
    if lambda.nrows() != n {
        return Err(Error::DimensionMismatch {
            expected: format!("{n} rows in loadings"),
            got: format!("{}", lambda.nrows()),
        });
    }
    let r = lambda.ncols();
    if r == 0 {
        return Ok(sigma_u_inv.clone());
    }
    let b = sigma_u_inv.as_matrix() * lambda; // N x r
    let inner = DMatrix::identity(r, r) + lambda.transpose() * &b;
    let chol = inner
        .cholesky()
        .ok_or(Error::SingularInnerSystem { dim: r })?;
    let solved = chol.solve(&b.transpose()); // r x N
    Ok(SymMatrix::symmetrized(sigma_u_inv.as_matrix() - &b * solved))
}

pub fn max_abs_diff(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    a.iter().zip(b.iter()).fold(0.0_f64, |m, (x, y)| m.max((x - y).abs()))
}

/// `(1/T) X Xᵀ` for an `N × T` panel, without demeaning.
pub fn second_moment(data: &DMatrix<f64>) -> SymMatrix {
    let t = data.ncols() as f64;
    SymMatrix::symmetrized(data * data.transpose() / t)
}
