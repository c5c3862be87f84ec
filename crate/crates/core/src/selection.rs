//! Choice of the number of factors (eigenvalue-difference rule with an
//! edge-calibrated threshold) and of the penalty `μ` (BIC-type criterion).

use log::debug;
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::SymMatrix;
use crate::panel::ReturnPanel;
use crate::saf::{
    assemble_saf_covariance, effective_sample_cov, fit_saf_from, initial_estimate, FactorFit,
    SafConfig, WarmStart,
};

const CALIBRATION_ROUNDS: usize = 10;
const CALIBRATION_POINTS: usize = 5;
const MAX_DOUBLINGS: usize = 60;
const BOUNDARY_BISECTIONS: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorCountResult {
    pub r_hat: usize,
    pub xi: f64,
    /// `π_i − π_{i+1}` for `i = 1..=r_max`.
    pub eigengaps: Vec<f64>,
    /// Eigenvalues of `S_x`, descending.
    pub eigenvalues: Vec<f64>,
}

/// Largest `r ≤ r_max` whose eigengap exceeds `ξ`, or 0.
fn count_above(gaps: &[f64], xi: f64) -> usize {
    gaps.iter().rposition(|g| *g > xi).map_or(0, |i| i + 1)
}

/// Slope of the OLS regression of `π_j, …, π_{j+4}` on `(j−1)^{2/3}, …`,
/// with `j` 1-based.
fn edge_slope(values: &[f64], j: usize) -> f64 {
    let xs: Vec<f64> = (j..j + CALIBRATION_POINTS).map(|k| ((k - 1) as f64).powf(2.0 / 3.0)).collect();
    let ys: Vec<f64> = (j..j + CALIBRATION_POINTS).map(|k| values[k - 1]).collect();
    let m = CALIBRATION_POINTS as f64;
    let xbar = xs.iter().sum::<f64>() / m;
    let ybar = ys.iter().sum::<f64>() / m;
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - xbar) * (y - ybar)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - xbar).powi(2)).sum();
    sxy / sxx
}

/// Factor count from a descending eigenvalue list. `xi_override` skips the
/// calibration (test hook); otherwise at least `r_max + 5` values are needed.
pub fn select_num_factors_from_eigenvalues(
    values: &[f64],
    r_max: usize,
    xi_override: Option<f64>,
) -> Result<FactorCountResult> {
    if r_max == 0 {
        return Err(Error::InvalidArgument("r_max must be >= 1".into()));
    }
    let needed = if xi_override.is_some() { r_max + 1 } else { r_max + CALIBRATION_POINTS };
    if values.len() < needed {
        return Err(Error::InsufficientDimensions(format!(
            "{} eigenvalues available, {needed} needed for r_max = {r_max}",
            values.len()
        )));
    }
    let gaps: Vec<f64> = (0..r_max).map(|i| values[i] - values[i + 1]).collect();
    let (xi, r_hat) = match xi_override {
        Some(xi) => (xi, count_above(&gaps, xi)),
        None => {
            let mut j = r_max + 1;
            let mut xi = 2.0 * edge_slope(values, j).abs();
            let mut r_hat = count_above(&gaps, xi);
            for _ in 1..CALIBRATION_ROUNDS {
                if r_hat + 1 == j {
                    break;
                }
                j = r_hat + 1;
                xi = 2.0 * edge_slope(values, j).abs();
                r_hat = count_above(&gaps, xi);
            }
            (xi, r_hat)
        }
    };
    Ok(FactorCountResult { r_hat, xi, eigengaps: gaps, eigenvalues: values.to_vec() })
}

/// Number of factors from the eigenvalues of the panel's `S_x`.
pub fn select_num_factors(panel: &ReturnPanel, r_max: usize) -> Result<FactorCountResult> {
    let (n, t) = (panel.n_series(), panel.n_periods());
    if r_max + 6 > n.min(t) {
        return Err(Error::InsufficientDimensions(format!(
            "r_max = {r_max} needs r_max + 6 <= min(N, T) = {}",
            n.min(t)
        )));
    }
    let values = panel.sample_cov().eigenvalues()?;
    select_num_factors_from_eigenvalues(values.as_slice(), r_max, None)
}

/// `2 κ √(ln N / N + ln N / (N T))`.
pub fn ic_penalty(kappa: usize, n: usize, t: usize) -> f64 {
    let (n, t) = (n as f64, t as f64);
    2.0 * kappa as f64 * (n.ln() / n + n.ln() / (n * t)).sqrt()
}

/// Criterion value from an already evaluated likelihood (test hook).
pub fn information_criterion_from_likelihood(likelihood: f64, kappa: usize, n: usize, t: usize) -> f64 {
    likelihood + ic_penalty(kappa, n, t)
}

/// `log|det Σ̂| + tr(S_x Σ̂⁻¹)` for a dense PD `Σ̂`.
pub fn dense_likelihood(sigma: &SymMatrix, s_x: &SymMatrix) -> Result<f64> {
    let inv = sigma.inverse_pd()?;
    let trace = s_x.as_matrix().component_mul(inv.as_matrix()).sum();
    Ok(sigma.log_det_pd()? + trace)
}

/// `IC(μ) = L(Λ̂, S_F̂, Σ̂_u^τ) + 2κ_μ √(ln N / N + ln N / (N T))`.
pub fn information_criterion(fit: &FactorFit, s_x: &SymMatrix, n: usize, t: usize) -> Result<f64> {
    let sigma = assemble_saf_covariance(fit)?.matrix;
    let likelihood = dense_likelihood(&sigma, s_x)?;
    Ok(information_criterion_from_likelihood(likelihood, fit.nonzero_loadings(), n, t))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MuSearchConfig {
    pub grid_size: usize,
    /// Lowest grid point as a fraction of `μ_max`.
    pub min_ratio: f64,
    /// Carry each solution into the next grid point; when false the grid is
    /// fit in parallel from the common unpenalized start.
    pub warm_path: bool,
    /// First value tried by the doubling search for `μ_max`.
    pub mu_start: f64,
    /// Only fits that keep all `r` loading columns compete, unless none does.
    pub full_rank_only: bool,
    pub base: SafConfig,
}

impl Default for MuSearchConfig {
    fn default() -> Self {
        Self { grid_size: 30, min_ratio: 1e-3, warm_path: true, mu_start: 0.25, full_rank_only: true, base: SafConfig::default() }
    }
}

#[derive(Debug, Clone)]
pub struct MuSelection {
    pub grid: Vec<f64>,
    /// `NaN` where the fit failed.
    pub ic_values: Vec<f64>,
    pub mu_star: f64,
    pub kappa_per_mu: Vec<usize>,
    /// Grid points whose fit errored or did not converge.
    pub failed: Vec<bool>,
    /// Grid points whose loadings lost a whole column. They only compete
    /// when no full-rank point is left.
    pub rank_deficient: Vec<bool>,
    pub mu_max: f64,
    /// The fit at `μ*`.
    pub fit: FactorFit,
}

/// `n` log-spaced points on `[ratio·hi, hi]`, ascending; a single point is `hi`.
pub fn log_grid(hi: f64, n: usize, ratio: f64) -> Vec<f64> {
    if n <= 1 {
        return vec![hi];
    }
    let lo = (hi * ratio).ln();
    let step = (hi.ln() - lo) / (n - 1) as f64;
    let mut grid: Vec<f64> = (0..n).map(|k| (lo + step * k as f64).exp()).collect();
    grid[n - 1] = hi;
    grid
}

/// Smallest doubling of `cfg.mu_start` whose fit zeroes every loading.
pub fn find_mu_max(panel: &ReturnPanel, cfg: &MuSearchConfig, warm: &WarmStart) -> Result<f64> {
    let mut mu = cfg.mu_start;
    for _ in 0..MAX_DOUBLINGS {
        let fit = fit_saf_from(panel, &SafConfig { mu, ..cfg.base.clone() }, Some(warm))?;
        if fit.nonzero_loadings() == 0 {
            return Ok(mu);
        }
        mu *= 2.0;
    }
    Err(Error::NumericalBreakdown("doubling search for mu_max did not zero the loadings".into()))
}

pub fn select_mu(panel: &ReturnPanel, r: usize, grid_size: usize) -> Result<MuSelection> {
    let cfg = MuSearchConfig { grid_size, base: SafConfig { r, ..SafConfig::default() }, ..Default::default() };
    select_mu_with(panel, &cfg)
}

/// Minimizes `IC(μ)` over a log-spaced grid on `(0, μ_max]`, among the
/// converged fits (by default only those that keep all `r` loading columns);
/// ties go to the smaller `μ`.
pub fn select_mu_with(panel: &ReturnPanel, cfg: &MuSearchConfig) -> Result<MuSelection> {
    if cfg.grid_size == 0 {
        return Err(Error::InvalidArgument("grid_size must be >= 1".into()));
    }
    cfg.base.validate()?;
    let (n, t) = (panel.n_series(), panel.n_periods());
    let s_x = effective_sample_cov(panel, cfg.base.epsilon_ridge);
    let start = initial_estimate(&s_x, &cfg.base)?;
    let mu_max = find_mu_max(panel, cfg, &start)?;
    let mut grid = log_grid(mu_max, cfg.grid_size, cfg.min_ratio);

    let fit_at = |mu: f64, warm: &WarmStart| fit_saf_from(panel, &SafConfig { mu, ..cfg.base.clone() }, Some(warm));
    let fits: Vec<Result<FactorFit>> = if cfg.warm_path {
        let mut warm = start.clone();
        grid.iter()
            .map(|&mu| {
                let fit = fit_at(mu, &warm);
                if let Ok(f) = &fit {
                    warm = f.warm_start();
                }
                fit
            })
            .collect()
    } else {
        grid.par_iter().map(|&mu| fit_at(mu, &start)).collect()
    };

    let r = cfg.base.r;
    let mut ic_values = Vec::with_capacity(grid.len());
    let mut kappa = Vec::with_capacity(grid.len());
    let mut failed = Vec::with_capacity(grid.len());
    let mut rank_deficient = Vec::with_capacity(grid.len());
    let mut ok_fits = Vec::with_capacity(grid.len());
    for (k, fit) in fits.into_iter().enumerate() {
        let scored = fit.and_then(|f| information_criterion(&f, &s_x, n, t).map(|ic| (f, ic)));
        match scored {
            Ok((f, ic)) if f.converged && ic.is_finite() => {
                ic_values.push(ic);
                kappa.push(f.nonzero_loadings());
                failed.push(false);
                rank_deficient.push(f.active_factors.len() < r);
                ok_fits.push(Some(f));
            }
            Ok((f, ic)) => {
                debug!("mu = {} excluded from the grid (converged = {}, IC = {ic})", grid[k], f.converged);
                ic_values.push(f64::NAN);
                kappa.push(f.nonzero_loadings());
                failed.push(true);
                rank_deficient.push(f.active_factors.len() < r);
                ok_fits.push(None);
            }
            Err(e) => {
                debug!("mu = {} excluded from the grid: {e}", grid[k]);
                ic_values.push(f64::NAN);
                kappa.push(0);
                failed.push(true);
                rank_deficient.push(true);
                ok_fits.push(None);
            }
        }
    }
    if cfg.full_rank_only {
        refine_rank_boundary(
            panel,
            cfg,
            &s_x,
            &mut grid,
            &mut ic_values,
            &mut kappa,
            &mut failed,
            &mut rank_deficient,
            &mut ok_fits,
        )?;
    }

    let argmin = |full_rank_only: bool| {
        let mut best: Option<(usize, f64)> = None;
        for (k, ic) in ic_values.iter().enumerate() {
            if failed[k] || (full_rank_only && rank_deficient[k]) {
                continue;
            }
            if best.is_none_or(|(_, b)| *ic < b) {
                best = Some((k, *ic));
            }
        }
        best
    };
    let (k_star, _) = argmin(cfg.full_rank_only)
        .or_else(|| argmin(false))
        .ok_or_else(|| Error::NumericalBreakdown("every grid point failed".into()))?;
    let fit = ok_fits.swap_remove(k_star).expect("best grid point has a fit");
    Ok(MuSelection {
        mu_star: grid[k_star],
        grid,
        ic_values,
        kappa_per_mu: kappa,
        failed,
        rank_deficient,
        mu_max,
        fit,
    })
}

/// Bisects in `ln μ` between the largest full-rank grid point and its
/// rank-deficient neighbour, then inserts the last full-rank fit found.
#[allow(clippy::too_many_arguments)]
fn refine_rank_boundary(
    panel: &ReturnPanel,
    cfg: &MuSearchConfig,
    s_x: &SymMatrix,
    grid: &mut Vec<f64>,
    ic_values: &mut Vec<f64>,
    kappa: &mut Vec<usize>,
    failed: &mut Vec<bool>,
    rank_deficient: &mut Vec<bool>,
    ok_fits: &mut Vec<Option<FactorFit>>,
) -> Result<()> {
    let r = cfg.base.r;
    let Some(lo_idx) = (0..grid.len()).rev().find(|&k| !failed[k] && !rank_deficient[k]) else {
        return Ok(());
    };
    if lo_idx + 1 == grid.len() || !rank_deficient[lo_idx + 1] {
        return Ok(());
    }
    let (n, t) = (panel.n_series(), panel.n_periods());
    let warm = ok_fits[lo_idx].as_ref().expect("full-rank point has a fit").warm_start();
    let (mut lo, mut hi) = (grid[lo_idx].ln(), grid[lo_idx + 1].ln());
    let mut found: Option<(f64, FactorFit, f64)> = None;
    for _ in 0..BOUNDARY_BISECTIONS {
        let mid = 0.5 * (lo + hi);
        let mu = mid.exp();
        let fit = fit_saf_from(panel, &SafConfig { mu, ..cfg.base.clone() }, Some(&warm))?;
        if fit.active_factors.len() < r {
            hi = mid;
            continue;
        }
        lo = mid;
        if fit.converged {
            let ic = information_criterion(&fit, s_x, n, t)?;
            if ic.is_finite() {
                found = Some((mu, fit, ic));
            }
        }
    }
    if let Some((mu, fit, ic)) = found {
        let at = lo_idx + 1;
        grid.insert(at, mu);
        ic_values.insert(at, ic);
        kappa.insert(at, fit.nonzero_loadings());
        failed.insert(at, false);
        rank_deficient.insert(at, false);
        ok_fits.insert(at, Some(fit));
    }
    Ok(())
}

/// Eigenvalues of a sample covariance, descending (scree data).
pub fn scree(data: &DMatrix<f64>) -> Result<DVector<f64>> {
    crate::linalg::second_moment(data).eigenvalues()
}
