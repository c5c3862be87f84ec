use log::debug;
use nalgebra::DMatrix;
use rayon::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimator::EstimatorId;
use crate::linalg::{soft_threshold, SymMatrix};
use crate::panel::ReturnPanel;
use crate::saf::{threshold_offdiagonal, CovarianceEstimate};

use super::{cov_of, ShrinkageDiagnostics};

/// Grid search outcome of a cross-validated tuning parameter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvChoice {
    pub grid: Vec<f64>,
    pub scores: Vec<f64>,
    pub chosen: f64,
}

impl CvChoice {
    /// Lowest score, ties to the smallest grid value.
    fn pick(grid: Vec<f64>, scores: Vec<f64>) -> Result<Self> {
        let mut best: Option<usize> = None;
        for (k, v) in scores.iter().enumerate() {
            if v.is_finite() && best.is_none_or(|b| *v < scores[b]) {
                best = Some(k);
            }
        }
        let best = best.ok_or_else(|| Error::NumericalBreakdown("no finite CV score".into()))?;
        Ok(Self { chosen: grid[best], grid, scores })
    }
}

/// A tuned estimate with its diagnostics and CV table.
#[derive(Debug, Clone)]
pub struct Tuned {
    pub estimate: CovarianceEstimate,
    pub diagnostics: ShrinkageDiagnostics,
    pub cv: CvChoice,
}

/// Random splits of `0..t` into (train, validation) index sets.
fn random_splits(t: usize, splits: usize, train_len: usize, seed: u64) -> Vec<(Vec<usize>, Vec<usize>)> {
    (0..splits)
        .map(|v| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(v as u64 + 1);
            let mut idx: Vec<usize> = (0..t).collect();
            idx.shuffle(&mut rng);
            let mut train = idx[..train_len].to_vec();
            let mut val = idx[train_len..].to_vec();
            train.sort_unstable();
            val.sort_unstable();
            (train, val)
        })
        .collect()
}

fn max_offdiag(s: &SymMatrix) -> f64 {
    let n = s.dim();
    let mut m = 0.0_f64;
    for i in 0..n {
        for j in (i + 1)..n {
            m = m.max(s[(i, j)].abs());
        }
    }
    m
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StConfig {
    /// Random half splits.
    pub n_splits: usize,
    pub grid_size: usize,
}

impl Default for StConfig {
    fn default() -> Self {
        Self { n_splits: 5, grid_size: 50 }
    }
}

/// `S_x` with off-diagonals soft-thresholded at `kappa`.
pub fn st_with_kappa(panel: &ReturnPanel, kappa: f64) -> CovarianceEstimate {
    let s = cov_of(&panel.original());
    CovarianceEstimate::new(threshold_offdiagonal(&s, kappa), EstimatorId::St).with_param("kappa", kappa)
}

/// Mean `‖T_κ(S_train) − S_val‖_F²` over random half splits, on a grid from
/// 0 to the largest absolute off-diagonal entry of `S_x`.
pub fn st_cv_scores(panel: &ReturnPanel, cfg: &StConfig, seed: u64) -> Result<CvChoice> {
    let t = panel.n_periods();
    if t < 4 {
        return Err(Error::InsufficientDimensions(format!("ST needs T >= 4, got {t}")));
    }
    if cfg.n_splits == 0 || cfg.grid_size < 2 {
        return Err(Error::InvalidArgument("ST needs >= 1 split and >= 2 grid points".into()));
    }
    let data = panel.original();
    let top = max_offdiag(&cov_of(&data));
    let grid: Vec<f64> = (0..cfg.grid_size).map(|k| top * k as f64 / (cfg.grid_size - 1) as f64).collect();
    let mut scores = vec![0.0; grid.len()];
    for (train, val) in random_splits(t, cfg.n_splits, t / 2, seed) {
        let s_train = cov_of(&data.select_columns(&train));
        let s_val = cov_of(&data.select_columns(&val));
        for (score, &kappa) in scores.iter_mut().zip(&grid) {
            *score += (threshold_offdiagonal(&s_train, kappa).as_matrix() - s_val.as_matrix()).norm_squared();
        }
    }
    for v in &mut scores {
        *v /= cfg.n_splits as f64;
    }
    CvChoice::pick(grid, scores)
}

/// Soft-thresholded sample covariance with a cross-validated threshold. The
/// output is not guaranteed to be positive definite.
pub fn st_threshold_cov(panel: &ReturnPanel, cfg: &StConfig, seed: u64) -> Result<Tuned> {
    let cv = st_cv_scores(panel, cfg, seed)?;
    let estimate = st_with_kappa(panel, cv.chosen);
    let diagnostics = ShrinkageDiagnostics { kappa: Some(cv.chosen), ..Default::default() };
    Ok(Tuned { estimate, diagnostics, cv })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BtConfig {
    pub max_outer: usize,
    pub max_inner: usize,
    /// Convergence tolerance on the max-abs change, relative to the mean variance.
    pub tol: f64,
    /// Also stop once an outer iteration lowers the objective by less than
    /// this fraction of its magnitude.
    pub obj_tol: f64,
    /// Ridge, relative to the mean variance, added when `S_x` is singular.
    pub ridge: f64,
    pub folds: usize,
    /// Penalty grid, in units of one over the mean variance.
    pub alpha_grid: Vec<f64>,
}

impl Default for BtConfig {
    fn default() -> Self {
        Self {
            max_outer: 200,
            max_inner: 20,
            tol: 1e-6,
            obj_tol: 1e-12,
            ridge: 1e-4,
            folds: 5,
            alpha_grid: vec![0.003, 0.01, 0.03, 0.1, 0.3, 1.0, 3.0, 10.0],
        }
    }
}

#[derive(Debug, Clone)]
pub struct BtFit {
    pub estimate: CovarianceEstimate,
    pub objective_trace: Vec<f64>,
    pub converged: bool,
    pub n_iter: usize,
}

/// `log det Σ + tr(Σ⁻¹ S) + α Σ_{i≠j} |σ_ij|`.
pub fn bt_objective(sigma: &SymMatrix, s: &SymMatrix, alpha: f64) -> Result<f64> {
    let chol = sigma
        .as_matrix()
        .clone()
        .cholesky()
        .ok_or(Error::NotPositiveDefinite { min_eigenvalue: f64::NAN })?;
    let log_det = 2.0 * chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>();
    let trace = chol.solve(s.as_matrix()).trace();
    Ok(log_det + trace + alpha * offdiag_l1(sigma))
}

fn offdiag_l1(sigma: &SymMatrix) -> f64 {
    let n = sigma.dim();
    let mut acc = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                acc += sigma[(i, j)].abs();
            }
        }
    }
    acc
}

/// `S_x`, ridged when it fails the PD test.
fn bt_input(s: SymMatrix, ridge: f64) -> SymMatrix {
    if s.is_positive_definite() {
        return s;
    }
    let n = s.dim();
    let level = ridge * s.trace() / n as f64;
    s.add(&SymMatrix::identity(n).scale(level))
}

/// Majorize-minimize fit of the lasso-penalized covariance likelihood. The
/// log-det term is linearized at the current iterate and the convex surrogate
/// is decreased by proximal-gradient steps with backtracking, which keeps
/// every iterate positive definite and the objective non-increasing.
pub fn bt_fit_matrix(s_in: SymMatrix, alpha: f64, cfg: &BtConfig) -> Result<BtFit> {
    bt_fit_from(s_in, alpha, cfg, None)
}

/// As [`bt_fit_matrix`], starting from `start` (positive definite) instead
/// of the input matrix.
fn bt_fit_from(s_in: SymMatrix, alpha: f64, cfg: &BtConfig, start: Option<&SymMatrix>) -> Result<BtFit> {
    if !(alpha >= 0.0) {
        return Err(Error::InvalidArgument("alpha_N must be nonnegative".into()));
    }
    let s = bt_input(s_in, cfg.ridge);
    let n = s.dim();
    let scale = s.trace() / n as f64;
    let tol = cfg.tol * scale;
    let mut sigma = match start {
        Some(m) if m.dim() == n && m.is_positive_definite() => m.clone(),
        _ => s.clone(),
    };
    let s_root = s
        .as_matrix()
        .clone()
        .cholesky()
        .ok_or(Error::NotPositiveDefinite { min_eigenvalue: f64::NAN })?
        .unpack();
    let mut current = bt_objective(&sigma, &s, alpha)?;
    let mut trace = vec![current];
    let mut step = scale * scale;
    let mut converged = false;
    let mut n_iter = 0;

    for _ in 0..cfg.max_outer {
        n_iter += 1;
        let p_m = sigma.inverse_pd()?;
        // smooth part of the surrogate: tr(P_m Σ) + tr(Σ⁻¹ S), with
        // tr(Σ⁻¹ S) = ‖L⁻¹ R‖² for Σ = L Lᵀ and S = R Rᵀ
        let smooth_value = |x: &SymMatrix| -> Option<f64> {
            let chol = x.as_matrix().clone().cholesky()?;
            let y = chol.l_dirty().solve_lower_triangular(&s_root)?;
            Some(p_m.as_matrix().component_mul(x.as_matrix()).sum() + y.norm_squared())
        };
        let smooth = |x: &SymMatrix| -> Option<(f64, DMatrix<f64>)> {
            let chol = x.as_matrix().clone().cholesky()?;
            let y = chol.l_dirty().solve_lower_triangular(&s_root)?;
            let z = chol.l_dirty().tr_solve_lower_triangular(&y)?;
            let value = p_m.as_matrix().component_mul(x.as_matrix()).sum() + y.norm_squared();
            Some((value, p_m.as_matrix() - &z * z.transpose()))
        };
        let penalized = |x: &SymMatrix, g: f64| g + alpha * offdiag_l1(x);
        // accelerated proximal gradient on the convex surrogate, restarted
        // whenever the surrogate goes up
        let mut inner = sigma.clone();
        let mut inner_value = {
            let (g, _) = smooth(&inner).ok_or(Error::NotPositiveDefinite { min_eigenvalue: f64::NAN })?;
            penalized(&inner, g)
        };
        let mut previous = inner.clone();
        let mut theta = 1.0_f64;
        for _ in 0..cfg.max_inner {
            let theta_next = 0.5 * (1.0 + (1.0 + 4.0 * theta * theta).sqrt());
            let beta = (theta - 1.0) / theta_next;
            let extrapolated = SymMatrix::from_upper_fn(n, |i, j| {
                inner[(i, j)] + beta * (inner[(i, j)] - previous[(i, j)])
            });
            let (base, (g0, grad)) = match smooth(&extrapolated) {
                Some(v) if beta > 0.0 => (extrapolated, v),
                _ => (inner.clone(), smooth(&inner).ok_or(Error::NotPositiveDefinite { min_eigenvalue: f64::NAN })?),
            };
            let mut accepted = None;
            let mut t = step * 2.0;
            for _ in 0..60 {
                let moved = base.as_matrix() - &grad * t;
                let cand = SymMatrix::from_upper_fn(n, |i, j| {
                    if i == j {
                        moved[(i, i)]
                    } else {
                        soft_threshold(moved[(i, j)], t * alpha)
                    }
                });
                if let Some(g1) = smooth_value(&cand) {
                    let delta = cand.as_matrix() - base.as_matrix();
                    let bound = g0 + grad.component_mul(&delta).sum() + delta.norm_squared() / (2.0 * t);
                    if g1 <= bound {
                        accepted = Some((penalized(&cand, g1), cand));
                        break;
                    }
                }
                t *= 0.5;
            }
            step = t;
            let Some((value, cand)) = accepted else { break };
            if value > inner_value {
                if beta > 0.0 {
                    theta = 1.0;
                    previous = inner.clone();
                    continue;
                }
                break;
            }
            let change = cand.max_abs_diff(&inner);
            previous = std::mem::replace(&mut inner, cand);
            inner_value = value;
            theta = theta_next;
            if change < tol {
                break;
            }
        }
        let value = bt_objective(&inner, &s, alpha)?;
        if value > current {
            // rounding-level increase: keep the previous iterate
            converged = true;
            break;
        }
        let change = inner.max_abs_diff(&sigma);
        let drop = current - value;
        sigma = inner;
        current = value;
        trace.push(current);
        if change < tol || drop < cfg.obj_tol * current.abs() {
            converged = true;
            break;
        }
    }
    if !converged {
        debug!("BT loop (alpha = {alpha}) stopped after {n_iter} iterations without converging");
    }
    sigma.check_positive_definite()?;
    let estimate = CovarianceEstimate::new(sigma, EstimatorId::Bt).with_param("alpha_n", alpha);
    Ok(BtFit { estimate, objective_trace: trace, converged, n_iter })
}

/// Lasso-penalized covariance at a fixed `alpha_N`.
pub fn bt_sparse_cov(panel: &ReturnPanel, alpha: f64, cfg: &BtConfig) -> Result<BtFit> {
    bt_fit_matrix(cov_of(&panel.original()), alpha, cfg)
}

/// `alpha_N` chosen by `cfg.folds`-fold cross-validation of the held-out
/// Gaussian likelihood.
pub fn bt_cross_validated(panel: &ReturnPanel, cfg: &BtConfig, seed: u64) -> Result<Tuned> {
    let t = panel.n_periods();
    if cfg.folds < 2 || t < 2 * cfg.folds {
        return Err(Error::InsufficientDimensions(format!(
            "{} folds need T >= {}, got {t}",
            cfg.folds,
            2 * cfg.folds
        )));
    }
    let data = panel.original();
    let full = cov_of(&data);
    let scale = full.trace() / full.dim() as f64;
    let grid: Vec<f64> = cfg.alpha_grid.iter().map(|a| a / scale).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..t).collect();
    order.shuffle(&mut rng);
    // each fold walks the grid in order, warm-starting from the previous fit
    let per_fold: Vec<Vec<f64>> = (0..cfg.folds)
        .into_par_iter()
        .map(|k| {
            let (lo, hi) = (k * t / cfg.folds, (k + 1) * t / cfg.folds);
            let mut val: Vec<usize> = order[lo..hi].to_vec();
            let mut train: Vec<usize> = order[..lo].iter().chain(&order[hi..]).copied().collect();
            val.sort_unstable();
            train.sort_unstable();
            let s_train = cov_of(&data.select_columns(&train));
            let s_val = cov_of(&data.select_columns(&val));
            let mut warm: Option<SymMatrix> = None;
            grid.iter()
                .map(|&alpha| match bt_fit_from(s_train.clone(), alpha, cfg, warm.as_ref()) {
                    Ok(fit) => {
                        let score = bt_objective(&fit.estimate.matrix, &s_val, 0.0).unwrap_or(f64::INFINITY);
                        warm = Some(fit.estimate.matrix);
                        score
                    }
                    Err(_) => f64::INFINITY,
                })
                .collect()
        })
        .collect();
    let mut scores = vec![0.0; grid.len()];
    for fold in &per_fold {
        for (acc, v) in scores.iter_mut().zip(fold) {
            *acc += v;
        }
    }
    let cv = CvChoice::pick(grid, scores.into_iter().map(|v| v / cfg.folds as f64).collect())?;
    let fit = bt_fit_matrix(full, cv.chosen, cfg)?;
    let diagnostics = ShrinkageDiagnostics { alpha_n: Some(cv.chosen), ..Default::default() };
    Ok(Tuned { estimate: fit.estimate, diagnostics, cv })
}
