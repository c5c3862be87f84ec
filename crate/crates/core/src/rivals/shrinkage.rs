use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimator::EstimatorId;
use crate::linalg::SymMatrix;
use crate::panel::{ObservedFactors, ReturnPanel};
use crate::saf::CovarianceEstimate;

use super::factor_models::fit_factor_model_raw;
use super::{centered, cov_of, panel_centered, ShrinkageDiagnostics};

fn lw_combine(s: &SymMatrix, target: &SymMatrix, alpha: f64) -> SymMatrix {
    SymMatrix::symmetrized(s.as_matrix() * alpha + target.as_matrix() * (1.0 - alpha))
}

/// Linear shrinkage of `S_x` toward the single-index covariance,
/// `α* S_x + (1 − α*) Σ̂_SIM`, with the plug-in intensity clipped to `[0, 1]`.
pub fn lw_shrinkage(
    panel: &ReturnPanel,
    factors: &ObservedFactors,
) -> Result<(CovarianceEstimate, ShrinkageDiagnostics)> {
    factors.require(1, "LW", panel.n_periods())?;
    let y = panel_centered(panel);
    let (n, t) = y.shape();
    let tf = t as f64;
    let f = centered(&factors.series.transpose()).transpose().column(0).into_owned();
    let var_m = f.norm_squared() / tf;
    if !(var_m > 0.0) {
        return Err(Error::DegenerateInput("market factor has zero variance".into()));
    }
    let s = SymMatrix::symmetrized(&y * y.transpose() / tf);
    let target = fit_factor_model_raw(&y, &DMatrix::from_column_slice(t, 1, f.as_slice()))?.covariance();
    let cov_m: DVector<f64> = &y * &f / tf;

    let y2 = y.map(|v| v * v);
    // π̂: asymptotic variances of the sample covariance entries
    let pi_mat = &y2 * y2.transpose() / tf - s.as_matrix().component_mul(s.as_matrix());
    let pi: f64 = pi_mat.sum();
    let rho_diag: f64 = pi_mat.diagonal().sum();

    // ρ̂: asymptotic covariances between target and sample entries
    let mut z = y.clone();
    for (k, mut col) in z.column_iter_mut().enumerate() {
        col *= f[k];
    }
    let mut v1 = &y2 * z.transpose() / tf;
    for i in 0..n {
        for j in 0..n {
            v1[(i, j)] -= cov_m[i] * s[(i, j)];
        }
    }
    let mut roff1 = 0.0;
    for i in 0..n {
        for j in 0..n {
            roff1 += v1[(i, j)] * cov_m[j];
        }
        roff1 -= v1[(i, i)] * cov_m[i];
    }
    roff1 /= var_m;
    let v3 = &z * z.transpose() / tf - s.as_matrix() * var_m;
    let mut roff3 = 0.0;
    for i in 0..n {
        for j in 0..n {
            roff3 += v3[(i, j)] * cov_m[i] * cov_m[j];
        }
        roff3 -= v3[(i, i)] * cov_m[i] * cov_m[i];
    }
    roff3 /= var_m * var_m;
    let rho = rho_diag + 2.0 * roff1 - roff3;

    // γ̂: misspecification of the target
    let gamma = (target.as_matrix() - s.as_matrix()).norm_squared();
    let target_weight = if gamma > 0.0 { ((pi - rho) / gamma / tf).clamp(0.0, 1.0) } else { 1.0 };
    let alpha = 1.0 - target_weight;

    let est = CovarianceEstimate::new(lw_combine(&s, &target, alpha), EstimatorId::Lw)
        .with_param("alpha_star", alpha);
    Ok((est, ShrinkageDiagnostics { alpha_star: Some(alpha), ..Default::default() }))
}

/// LW combination at a fixed weight on `S_x` (test hook).
pub fn lw_with_alpha(
    panel: &ReturnPanel,
    factors: &ObservedFactors,
    alpha: f64,
) -> Result<CovarianceEstimate> {
    factors.require(1, "LW", panel.n_periods())?;
    let y = panel_centered(panel);
    let s = SymMatrix::symmetrized(&y * y.transpose() / y.ncols() as f64);
    let target = fit_factor_model_raw(&y, &factors.series)?.covariance();
    Ok(CovarianceEstimate::new(lw_combine(&s, &target, alpha), EstimatorId::Lw)
        .with_param("alpha_star", alpha))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KdmConfig {
    /// Contiguous cross-validation blocks.
    pub folds: usize,
    /// Spacing of the simplex grid for `ζ`.
    pub grid_step: f64,
}

impl Default for KdmConfig {
    fn default() -> Self {
        Self { folds: 5, grid_step: 0.1 }
    }
}

#[derive(Debug, Clone)]
pub struct KdmOutput {
    pub precision: SymMatrix,
    pub diagnostics: ShrinkageDiagnostics,
    pub candidates: Vec<[f64; 3]>,
    /// Mean out-of-sample GMVP variance per candidate.
    pub cv_scores: Vec<f64>,
}

/// Points of the simplex `ζ₁ + ζ₂ + ζ₃ = 1`, `ζ ≥ 0`, on a grid of spacing `step`.
pub fn kdm_candidates(step: f64) -> Vec<[f64; 3]> {
    let m = (1.0 / step).round().max(1.0) as usize;
    let mut out = Vec::new();
    for i in 0..=m {
        for j in 0..=(m - i) {
            let k = m - i - j;
            out.push([i as f64 / m as f64, j as f64 / m as f64, k as f64 / m as f64]);
        }
    }
    out
}

/// The three precision components of an `N × T` block: `S⁺`, `I`, `Σ_SIM⁻¹`.
fn kdm_parts(data: &DMatrix<f64>, market: &DMatrix<f64>) -> Result<(SymMatrix, SymMatrix)> {
    let s_pinv = cov_of(data).pseudo_inverse()?;
    let sim_inv = fit_factor_model_raw(data, market)?.covariance().inverse_pd()?;
    Ok((s_pinv, sim_inv))
}

fn combine(zeta: [f64; 3], s_pinv: &SymMatrix, sim_inv: &SymMatrix) -> SymMatrix {
    let n = s_pinv.dim();
    SymMatrix::symmetrized(
        s_pinv.as_matrix() * zeta[0]
            + DMatrix::<f64>::identity(n, n) * zeta[1]
            + sim_inv.as_matrix() * zeta[2],
    )
}

/// `ζ₁ S_x⁺ + ζ₂ I + ζ₃ Σ̂_SIM⁻¹` at a fixed `ζ` (test hook).
pub fn kdm_with_zeta(
    panel: &ReturnPanel,
    factors: &ObservedFactors,
    zeta: [f64; 3],
) -> Result<SymMatrix> {
    factors.require(1, "KDM", panel.n_periods())?;
    let (s_pinv, sim_inv) = kdm_parts(&panel.original(), &factors.series)?;
    Ok(combine(zeta, &s_pinv, &sim_inv))
}

/// Contiguous `[start, end)` blocks of `0..t`.
fn fold_bounds(t: usize, folds: usize) -> Vec<(usize, usize)> {
    (0..folds).map(|k| (k * t / folds, (k + 1) * t / folds)).collect()
}

fn take_columns(data: &DMatrix<f64>, cols: &[usize]) -> DMatrix<f64> {
    data.select_columns(cols)
}

fn take_rows(data: &DMatrix<f64>, rows: &[usize]) -> DMatrix<f64> {
    data.select_rows(rows)
}

/// Mean out-of-sample GMVP variance over contiguous folds for each candidate.
pub fn kdm_cv_scores(
    panel: &ReturnPanel,
    factors: &ObservedFactors,
    cfg: &KdmConfig,
    candidates: &[[f64; 3]],
) -> Result<Vec<f64>> {
    factors.require(1, "KDM", panel.n_periods())?;
    let t = panel.n_periods();
    if cfg.folds < 2 || t < 2 * cfg.folds + 2 {
        return Err(Error::InsufficientDimensions(format!(
            "{} folds need T >= {}, got {t}",
            cfg.folds,
            2 * cfg.folds + 2
        )));
    }
    let data = panel.original();
    let n = data.nrows();
    let ones = DVector::from_element(n, 1.0);
    let mut totals = vec![0.0; candidates.len()];
    for (start, end) in fold_bounds(t, cfg.folds) {
        let train: Vec<usize> = (0..t).filter(|s| *s < start || *s >= end).collect();
        let test: Vec<usize> = (start..end).collect();
        let (s_pinv, sim_inv) =
            kdm_parts(&take_columns(&data, &train), &take_rows(&factors.series, &train))?;
        let a = s_pinv.as_matrix() * &ones;
        let c = sim_inv.as_matrix() * &ones;
        let held = take_columns(&data, &test);
        for (score, zeta) in totals.iter_mut().zip(candidates) {
            let raw = &a * zeta[0] + &ones * zeta[1] + &c * zeta[2];
            let denom = raw.sum();
            if !(denom > 0.0) || !denom.is_finite() {
                *score = f64::INFINITY;
                continue;
            }
            let w = raw / denom;
            let r = held.transpose() * w;
            let mean = r.mean();
            *score += r.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / r.len() as f64;
        }
    }
    Ok(totals.into_iter().map(|v| v / cfg.folds as f64).collect())
}

/// KDM precision with `ζ` chosen by contiguous-block cross-validation of the
/// out-of-sample GMVP variance. Ties go to the first candidate.
pub fn kdm_precision(
    panel: &ReturnPanel,
    factors: &ObservedFactors,
    cfg: &KdmConfig,
) -> Result<KdmOutput> {
    let candidates = kdm_candidates(cfg.grid_step);
    let cv_scores = kdm_cv_scores(panel, factors, cfg, &candidates)?;
    let mut best = 0;
    for (k, v) in cv_scores.iter().enumerate() {
        if *v < cv_scores[best] {
            best = k;
        }
    }
    if !cv_scores[best].is_finite() {
        return Err(Error::NumericalBreakdown("no KDM candidate gave a valid portfolio".into()));
    }
    let zeta = candidates[best];
    let precision = kdm_with_zeta(panel, factors, zeta)?;
    Ok(KdmOutput {
        precision,
        diagnostics: ShrinkageDiagnostics { zeta, ..Default::default() },
        candidates,
        cv_scores,
    })
}

/// Design-free estimator: full-sample eigenvectors with eigenvalues
/// `diag(Γ̂₁ᵀ S₂ Γ̂₁)` computed from the second block of observations.
pub fn adz_design_free(panel: &ReturnPanel, split_n: usize) -> Result<CovarianceEstimate> {
    let t = panel.n_periods();
    if split_n < 2 || split_n + 2 > t {
        return Err(Error::InsufficientDimensions(format!(
            "split point {split_n} must satisfy 2 <= n <= T - 2 (T = {t})"
        )));
    }
    let data = panel.original();
    let gamma = cov_of(&data).eigen()?.vectors;
    let x1 = data.columns(0, split_n).into_owned();
    let x2 = data.columns(split_n, t - split_n).into_owned();
    let gamma1 = cov_of(&x1).eigen()?.vectors;
    let s2 = cov_of(&x2);
    let p = (s2.as_matrix() * &gamma1).component_mul(&gamma1).row_sum().transpose();
    let n = data.nrows();
    let scaled = DMatrix::from_fn(n, n, |i, j| gamma[(i, j)] * p[j]);
    let est = CovarianceEstimate::new(SymMatrix::symmetrized(scaled * gamma.transpose()), EstimatorId::Adz)
        .with_param("split_n", split_n as f64);
    Ok(est)
}
