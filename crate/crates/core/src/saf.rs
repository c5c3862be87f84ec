//! Sparse approximate factor (SAF) estimation.
//!
//! The loadings `Λ` (N×r) and the diagonal noise variances `Φ_u` minimize the
//! l1-penalized negative quasi log-likelihood
//!
//! ```text
//! log|det(ΛΛᵀ + Φ_u)| + tr(S_x (ΛΛᵀ + Φ_u)⁻¹) + μ Σ|λ_ik|
//! ```
//!
//! by a majorize-minimize loop: the concave log-det term is replaced by its
//! tangent plane at the current iterate, the resulting convex surrogate gets
//! one proximal-gradient (soft-threshold) step in `Λ`, and `Φ_u` takes one EM
//! step. Factors are then recovered by GLS and the residual covariance is
//! soft-thresholded at `τ = 1/√N + √(ln N / T)`.
//!
//! All `N × N` inverses go through the `r × r` Woodbury system, so one outer
//! iteration costs `O(N² r)`.

use std::collections::BTreeMap;

use log::debug;
use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimator::EstimatorId;
use crate::linalg::{soft_threshold, spectral_norm_rect, woodbury_precision, SymMatrix};
use crate::panel::ReturnPanel;

/// Lower bound applied to every EM update of the noise variances.
pub const PHI_FLOOR: f64 = 1e-8;

const MAX_STEP_HALVINGS: usize = 40;
/// Accepted steps double the depth, up to this multiple of `step_t`.
const MAX_STEP_GROWTH: f64 = 1024.0;
const MAX_PHI_DAMPING: usize = 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SafConfig {
    /// l1 penalty on the loadings.
    pub mu: f64,
    /// Number of factors.
    pub r: usize,
    /// Depth of the projected-gradient step.
    pub step_t: f64,
    pub max_outer_iter: usize,
    /// Stopping tolerance on the spectral norms of the parameter changes.
    pub conv_tol: f64,
    /// Added to the diagonal of `S_x` when `N > T`.
    pub epsilon_ridge: f64,
    /// Iterations of the unpenalized warm start.
    pub init_iter: usize,
    /// Overrides the POET threshold (test hook).
    pub tau_override: Option<f64>,
}

impl Default for SafConfig {
    fn default() -> Self {
        Self {
            mu: 0.0,
            r: 1,
            step_t: 0.01,
            max_outer_iter: 500,
            conv_tol: 1e-6,
            epsilon_ridge: 1e-4,
            init_iter: 100,
            tau_override: None,
        }
    }
}

impl SafConfig {
    pub fn new(r: usize, mu: f64) -> Self {
        Self { r, mu, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.r == 0 {
            return Err(Error::InvalidArgument("number of factors r must be >= 1".into()));
        }
        if !(self.step_t > 0.0) || !(self.conv_tol > 0.0) {
            return Err(Error::InvalidArgument("step_t and conv_tol must be positive".into()));
        }
        if !(self.mu >= 0.0) || !(self.epsilon_ridge >= 0.0) {
            return Err(Error::InvalidArgument("mu and epsilon_ridge must be nonnegative".into()));
        }
        Ok(())
    }
}

/// Starting point of the penalized loop.
#[derive(Debug, Clone, PartialEq)]
pub struct WarmStart {
    pub loadings: DMatrix<f64>,
    pub phi_u: DVector<f64>,
}

/// Output of [`fit_saf`]. All quantities live on the scale of the panel's
/// stored (standardized) observations.
#[derive(Debug, Clone)]
pub struct FactorFit {
    pub loadings: DMatrix<f64>,
    /// GLS factor estimates, `T × r`. Columns of all-zero loadings are zero.
    pub factors: DMatrix<f64>,
    pub phi_u: DVector<f64>,
    /// POET-thresholded residual covariance.
    pub sigma_u_tau: SymMatrix,
    /// Penalized objective at the start of the penalized loop and after
    /// every outer iteration.
    pub objective_trace: Vec<f64>,
    pub converged: bool,
    pub n_iter: usize,
    pub mu: f64,
    pub tau: f64,
    /// Loading columns that survived the penalty and entered GLS.
    pub active_factors: Vec<usize>,
}

impl FactorFit {
    /// Number of nonzero loadings.
    pub fn nonzero_loadings(&self) -> usize {
        self.loadings.iter().filter(|v| **v != 0.0).count()
    }

    pub fn zero_loadings(&self) -> usize {
        self.loadings.len() - self.nonzero_loadings()
    }

    pub fn warm_start(&self) -> WarmStart {
        WarmStart { loadings: self.loadings.clone(), phi_u: self.phi_u.clone() }
    }

    /// Sample covariance of the estimated factors, `(1/T) Σ (f_t − f̄)(f_t − f̄)ᵀ`.
    pub fn factor_cov(&self) -> DMatrix<f64> {
        let t = self.factors.nrows() as f64;
        let r = self.factors.ncols();
        let means = DVector::from_fn(r, |k, _| self.factors.column(k).mean());
        let mut centered = self.factors.clone();
        for k in 0..r {
            centered.column_mut(k).add_scalar_mut(-means[k]);
        }
        centered.transpose() * &centered / t
    }
}

/// A covariance matrix together with where it came from.
#[derive(Debug, Clone)]
pub struct CovarianceEstimate {
    pub matrix: SymMatrix,
    pub estimator_id: EstimatorId,
    pub params: BTreeMap<String, f64>,
    /// Result of the relative PD test on `matrix`.
    pub positive_definite: bool,
}

impl CovarianceEstimate {
    pub fn new(matrix: SymMatrix, estimator_id: EstimatorId) -> Self {
        let positive_definite = matrix.is_positive_definite();
        Self { matrix, estimator_id, params: BTreeMap::new(), positive_definite }
    }

    pub fn with_param(mut self, key: &str, value: f64) -> Self {
        self.params.insert(key.to_string(), value);
        self
    }
}

/// Woodbury representation of `Σ = ΛΛᵀ + Φ` for a diagonal `Φ`.
struct Implied<'a> {
    lambda: &'a DMatrix<f64>,
    phi: &'a DVector<f64>,
    /// `Φ⁻¹ Λ`
    b: DMatrix<f64>,
    /// Cholesky factor of `I_r + Λᵀ Φ⁻¹ Λ`
    inner: Cholesky<f64, Dyn>,
}

impl<'a> Implied<'a> {
    fn new(lambda: &'a DMatrix<f64>, phi: &'a DVector<f64>) -> Result<Self> {
        if lambda.nrows() != phi.len() {
            return Err(Error::DimensionMismatch {
                expected: format!("{} rows in loadings", phi.len()),
                got: lambda.nrows().to_string(),
            });
        }
        if let Some(bad) = phi.iter().copied().find(|v| !(*v > 0.0) || !v.is_finite()) {
            return Err(Error::NotPositiveDefinite { min_eigenvalue: bad });
        }
        let r = lambda.ncols();
        let mut b = lambda.clone();
        for (i, mut row) in b.row_iter_mut().enumerate() {
            row /= phi[i];
        }
        let inner = (DMatrix::identity(r, r) + lambda.transpose() * &b)
            .cholesky()
            .ok_or(Error::SingularInnerSystem { dim: r })?;
        Ok(Self { lambda, phi, b, inner })
    }

    fn log_det(&self) -> f64 {
        let inner: f64 = self.inner.l_dirty().diagonal().iter().map(|d| d.ln()).sum();
        self.phi.iter().map(|v| v.ln()).sum::<f64>() + 2.0 * inner
    }

    /// `Σ⁻¹ Y`
    fn apply_inverse(&self, y: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = y.clone();
        for (i, mut row) in out.row_iter_mut().enumerate() {
            row /= self.phi[i];
        }
        let correction = &self.b * self.inner.solve(&(self.b.transpose() * y));
        out - correction
    }

    /// `tr(S Σ⁻¹)`
    fn trace_with(&self, s: &SymMatrix) -> f64 {
        let diag: f64 = (0..self.phi.len()).map(|i| s[(i, i)] / self.phi[i]).sum();
        let sb = s.as_matrix() * &self.b;
        let inner = self.inner.solve(&(self.b.transpose() * sb));
        diag - inner.trace()
    }

    /// `Σ⁻¹ Λ`
    fn inverse_times_lambda(&self) -> DMatrix<f64> {
        self.apply_inverse(self.lambda)
    }
}

/// `log|det(ΛΛᵀ + Φ_u)| + tr(S_x (ΛΛᵀ + Φ_u)⁻¹)`.
pub fn quasi_log_likelihood(
    lambda: &DMatrix<f64>,
    phi_u: &DVector<f64>,
    s_x: &SymMatrix,
) -> Result<f64> {
    let implied = Implied::new(lambda, phi_u)?;
    Ok(implied.log_det() + implied.trace_with(s_x))
}

/// Quasi log-likelihood plus `μ Σ|λ_ik|`.
pub fn penalized_objective(
    lambda: &DMatrix<f64>,
    phi_u: &DVector<f64>,
    s_x: &SymMatrix,
    mu: f64,
) -> Result<f64> {
    let l1: f64 = lambda.iter().map(|v| v.abs()).sum();
    Ok(quasi_log_likelihood(lambda, phi_u, s_x)? + mu * l1)
}

/// Gradient of the majorized likelihood at `Λ_m`:
/// `Â = 2[Σ_m⁻¹ − Σ_m⁻¹ S_x Σ_m⁻¹] Λ_m` with `Σ_m = Λ_mΛ_mᵀ + Φ_m`.
pub fn majorization_gradient(
    lambda_m: &DMatrix<f64>,
    phi_u_m: &DVector<f64>,
    s_x: &SymMatrix,
) -> Result<DMatrix<f64>> {
    let implied = Implied::new(lambda_m, phi_u_m)?;
    let p_lambda = implied.inverse_times_lambda();
    let s_p_lambda = s_x.as_matrix() * &p_lambda;
    Ok((p_lambda - implied.apply_inverse(&s_p_lambda)) * 2.0)
}

/// `S(Λ_m − t Â, t μ)` elementwise.
pub fn loading_update(
    lambda_m: &DMatrix<f64>,
    a_hat: &DMatrix<f64>,
    step_t: f64,
    mu: f64,
) -> DMatrix<f64> {
    let threshold = step_t * mu;
    lambda_m.zip_map(a_hat, |l, a| soft_threshold(l - step_t * a, threshold))
}

/// EM update `diag[S_x − Λ_new Λ_mᵀ (Λ_mΛ_mᵀ + Φ_m)⁻¹ S_x]`, floored at
/// [`PHI_FLOOR`].
pub fn phi_update(
    s_x: &SymMatrix,
    lambda_new: &DMatrix<f64>,
    lambda_m: &DMatrix<f64>,
    phi_u_m: &DVector<f64>,
) -> Result<DVector<f64>> {
    let implied = Implied::new(lambda_m, phi_u_m)?;
    // (Σ_m⁻¹ Λ_m)ᵀ S_x = Λ_mᵀ Σ_m⁻¹ S_x, an r × N matrix
    let c = implied.inverse_times_lambda().transpose() * s_x.as_matrix();
    let n = s_x.dim();
    Ok(DVector::from_fn(n, |i, _| {
        let explained = lambda_new.row(i).dot(&c.column(i).transpose());
        (s_x[(i, i)] - explained).max(PHI_FLOOR)
    }))
}

/// `S_x` of the panel, with `ε` added to the diagonal when `N > T`.
pub fn effective_sample_cov(panel: &ReturnPanel, epsilon_ridge: f64) -> SymMatrix {
    let s = panel.sample_cov();
    if panel.n_series() > panel.n_periods() && epsilon_ridge > 0.0 {
        let n = s.dim();
        s.add(&SymMatrix::identity(n).scale(epsilon_ridge))
    } else {
        s
    }
}

/// Principal-components start refined by the unpenalized MM loop.
pub fn initial_estimate(s_x: &SymMatrix, cfg: &SafConfig) -> Result<WarmStart> {
    let n = s_x.dim();
    let r = cfg.r;
    let eig = s_x.eigen()?;
    let lambda = DMatrix::from_fn(n, r, |i, k| eig.vectors[(i, k)] * eig.values[k].max(0.0).sqrt());
    let phi = DVector::from_fn(n, |i, _| {
        let common = lambda.row(i).norm_squared();
        (s_x[(i, i)] - common).max(0.1 * s_x[(i, i)]).max(PHI_FLOOR)
    });
    let mut state = WarmStart { loadings: lambda, phi_u: phi };
    let unpenalized = SafConfig { mu: 0.0, max_outer_iter: cfg.init_iter, ..cfg.clone() };
    run_mm(s_x, &unpenalized, &mut state)?;
    Ok(state)
}

/// Outcome of the MM loop.
struct MmRun {
    trace: Vec<f64>,
    converged: bool,
    n_iter: usize,
}

/// Majorize-minimize loop. One proximal-gradient step on the loadings and one
/// EM step on the noise variances per outer iteration. A step that would raise
/// the penalized objective is halved (loadings) or damped toward the previous
/// value (noise variances), which keeps the objective trace monotone. The
/// projection depth starts at `step_t` and doubles after every step accepted
/// without halving.
fn run_mm(s_x: &SymMatrix, cfg: &SafConfig, state: &mut WarmStart) -> Result<MmRun> {
    let mu = cfg.mu;
    let mut lambda = state.loadings.clone();
    let mut phi = state.phi_u.clone();
    let mut current = penalized_objective(&lambda, &phi, s_x, mu)?;
    let mut trace = vec![current];
    let mut converged = false;
    let mut n_iter = 0;

    let max_step = cfg.step_t * MAX_STEP_GROWTH;
    let mut step = cfg.step_t;
    for _ in 0..cfg.max_outer_iter {
        n_iter += 1;
        let a_hat = majorization_gradient(&lambda, &phi, s_x)?;
        let current_smooth = current - mu * lambda.iter().map(|v| v.abs()).sum::<f64>();

        let mut t = step;
        let mut lambda_next = lambda.clone();
        let mut after_lambda = current;
        for halving in 0..MAX_STEP_HALVINGS {
            let candidate = loading_update(&lambda, &a_hat, t, mu);
            let value = penalized_objective(&candidate, &phi, s_x, mu)?;
            let delta = &candidate - &lambda;
            let smooth = value - mu * candidate.iter().map(|v| v.abs()).sum::<f64>();
            let bound = current_smooth + a_hat.dot(&delta) + delta.norm_squared() / (2.0 * t);
            if value <= current && smooth <= bound {
                lambda_next = candidate;
                after_lambda = value;
                step = if halving == 0 { (t * 2.0).min(max_step) } else { t };
                break;
            }
            t *= 0.5;
        }

        let phi_em = phi_update(s_x, &lambda_next, &lambda, &phi)?;
        let mut phi_next = phi.clone();
        let mut after_phi = after_lambda;
        let mut weight = 1.0;
        for _ in 0..MAX_PHI_DAMPING {
            let candidate = phi.zip_map(&phi_em, |old, new| old + weight * (new - old));
            let value = penalized_objective(&lambda_next, &candidate, s_x, mu)?;
            if value <= after_lambda {
                phi_next = candidate;
                after_phi = value;
                break;
            }
            weight *= 0.5;
        }

        let d_lambda = spectral_norm_rect(&(&lambda_next - &lambda))?;
        let d_phi = phi_next.zip_fold(&phi, 0.0_f64, |m, a, b| m.max((a - b).abs()));
        lambda = lambda_next;
        phi = phi_next;
        current = after_phi;
        trace.push(current);
        if d_lambda < cfg.conv_tol && d_phi < cfg.conv_tol {
            converged = true;
            break;
        }
    }

    state.loadings = lambda;
    state.phi_u = phi;
    Ok(MmRun { trace, converged, n_iter })
}

/// Column ordering (ascending number of zeros, ties by descending norm) and
/// sign convention (first nonzero entry nonnegative).
pub fn identify_loadings(lambda: &DMatrix<f64>) -> DMatrix<f64> {
    let r = lambda.ncols();
    let mut order: Vec<usize> = (0..r).collect();
    let zeros: Vec<usize> =
        (0..r).map(|k| lambda.column(k).iter().filter(|v| **v == 0.0).count()).collect();
    let norms: Vec<f64> = (0..r).map(|k| lambda.column(k).norm_squared()).collect();
    order.sort_by(|&a, &b| zeros[a].cmp(&zeros[b]).then(norms[b].total_cmp(&norms[a])));
    let mut out = DMatrix::zeros(lambda.nrows(), r);
    for (dst, &src) in order.iter().enumerate() {
        let col = lambda.column(src);
        let sign = match col.iter().find(|v| **v != 0.0) {
            Some(v) if *v < 0.0 => -1.0,
            _ => 1.0,
        };
        out.set_column(dst, &(col * sign));
    }
    out
}

/// GLS factors `f̂_t = (ΛᵀΦ⁻¹Λ)⁻¹ΛᵀΦ⁻¹x_t`, returned as a `T × r` matrix.
pub fn gls_factors(
    x: &DMatrix<f64>,
    lambda: &DMatrix<f64>,
    phi_u: &DVector<f64>,
) -> Result<DMatrix<f64>> {
    let r = lambda.ncols();
    if x.nrows() != lambda.nrows() || phi_u.len() != lambda.nrows() {
        return Err(Error::DimensionMismatch {
            expected: format!("{} series", lambda.nrows()),
            got: format!("panel {} / noise {}", x.nrows(), phi_u.len()),
        });
    }
    if (0..r).any(|k| lambda.column(k).iter().all(|v| *v == 0.0)) {
        return Err(Error::SingularInnerSystem { dim: r });
    }
    let mut weighted = lambda.clone();
    for (i, mut row) in weighted.row_iter_mut().enumerate() {
        row /= phi_u[i];
    }
    let gram = lambda.transpose() * &weighted;
    let chol = gram.cholesky().ok_or(Error::SingularInnerSystem { dim: r })?;
    Ok(chol.solve(&(weighted.transpose() * x)).transpose())
}

/// POET threshold `1/√N + √(ln N / T)`.
pub fn poet_threshold(n: usize, t: usize) -> f64 {
    1.0 / (n as f64).sqrt() + ((n as f64).ln() / t as f64).sqrt()
}

/// Soft-thresholds every off-diagonal entry at `tau`; the diagonal is kept.
pub fn threshold_offdiagonal(s: &SymMatrix, tau: f64) -> SymMatrix {
    let n = s.dim();
    SymMatrix::from_upper_fn(n, |i, j| if i == j { s[(i, i)] } else { soft_threshold(s[(i, j)], tau) })
}

/// POET covariance of an `N × T` residual matrix at the default threshold.
pub fn poet_residual_cov(residuals: &DMatrix<f64>) -> Result<SymMatrix> {
    let (n, t) = residuals.shape();
    poet_residual_cov_with_tau(residuals, poet_threshold(n, t))
}

pub fn poet_residual_cov_with_tau(residuals: &DMatrix<f64>, tau: f64) -> Result<SymMatrix> {
    let (n, t) = residuals.shape();
    if t < 2 || n == 0 {
        return Err(Error::InsufficientDimensions(format!("residuals are {n}x{t}")));
    }
    let s_u = crate::linalg::second_moment(residuals);
    Ok(threshold_offdiagonal(&s_u, tau))
}

/// Fits the SAF model to the panel's stored observations.
pub fn fit_saf(panel: &ReturnPanel, cfg: &SafConfig) -> Result<FactorFit> {
    fit_saf_from(panel, cfg, None)
}

/// Like [`fit_saf`], starting the penalized loop from `warm` instead of the
/// principal-components/unpenalized initialization.
pub fn fit_saf_from(
    panel: &ReturnPanel,
    cfg: &SafConfig,
    warm: Option<&WarmStart>,
) -> Result<FactorFit> {
    cfg.validate()?;
    let (n, t) = (panel.n_series(), panel.n_periods());
    if t < cfg.r + 2 || cfg.r > n {
        return Err(Error::InsufficientDimensions(format!(
            "r = {} factors need T >= r + 2 and r <= N (N = {n}, T = {t})",
            cfg.r
        )));
    }
    let s_x = effective_sample_cov(panel, cfg.epsilon_ridge);
    if let Some(i) = (0..n).find(|&i| !(s_x[(i, i)] > 0.0)) {
        return Err(Error::DegenerateInput(format!("series {i} has zero variance")));
    }

    let mut state = match warm {
        Some(w) => {
            if w.loadings.shape() != (n, cfg.r) || w.phi_u.len() != n {
                return Err(Error::DimensionMismatch {
                    expected: format!("{n}x{} warm start", cfg.r),
                    got: format!("{}x{}", w.loadings.nrows(), w.loadings.ncols()),
                });
            }
            w.clone()
        }
        None => initial_estimate(&s_x, cfg)?,
    };
    let run = run_mm(&s_x, cfg, &mut state)?;
    if !run.converged {
        debug!(
            "SAF loop (mu = {}, r = {}) stopped after {} iterations without converging",
            cfg.mu, cfg.r, run.n_iter
        );
    }
    debug!("SAF mu={} r={} iterations={}", cfg.mu, cfg.r, run.n_iter);

    let loadings = identify_loadings(&state.loadings);
    let active: Vec<usize> =
        (0..cfg.r).filter(|&k| loadings.column(k).iter().any(|v| *v != 0.0)).collect();
    let mut factors = DMatrix::zeros(t, cfg.r);
    if !active.is_empty() {
        let sub = loadings.select_columns(&active);
        let f = gls_factors(panel.data(), &sub, &state.phi_u)?;
        for (j, &k) in active.iter().enumerate() {
            factors.set_column(k, &f.column(j));
        }
    }
    let residuals = panel.data() - &loadings * factors.transpose();
    let tau = cfg.tau_override.unwrap_or_else(|| poet_threshold(n, t));
    let sigma_u_tau = poet_residual_cov_with_tau(&residuals, tau)?;

    Ok(FactorFit {
        loadings,
        factors,
        phi_u: state.phi_u,
        sigma_u_tau,
        objective_trace: run.trace,
        converged: run.converged,
        n_iter: run.n_iter,
        mu: cfg.mu,
        tau,
        active_factors: active,
    })
}

/// `Σ̂_SAF = Λ̂ S_F̂ Λ̂ᵀ + Σ̂_u^τ` on the fit's (standardized) scale.
pub fn assemble_saf_covariance(fit: &FactorFit) -> Result<CovarianceEstimate> {
    let common = &fit.loadings * fit.factor_cov() * fit.loadings.transpose();
    let matrix = SymMatrix::symmetrized(common + fit.sigma_u_tau.as_matrix());
    matrix.check_positive_definite()?;
    let mut est = CovarianceEstimate::new(matrix, EstimatorId::Saf)
        .with_param("mu", fit.mu)
        .with_param("r", fit.loadings.ncols() as f64)
        .with_param("tau", fit.tau)
        .with_param("active_factors", fit.active_factors.len() as f64)
        .with_param("nonzero_loadings", fit.nonzero_loadings() as f64)
        .with_param("iterations", fit.n_iter as f64)
        .with_param("converged", if fit.converged { 1.0 } else { 0.0 });
    est.positive_definite = true;
    Ok(est)
}

/// `(Λ̂ Λ̂ᵀ + Φ̂)⁻¹` of a fit, the precision implied by the first-step model.
pub fn implied_precision(fit: &FactorFit) -> Result<SymMatrix> {
    let inv = SymMatrix::from_diagonal(&fit.phi_u.map(|v| 1.0 / v));
    woodbury_precision(&fit.loadings, &inv)
}
