use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::estimator::EstimatorId;
use crate::linalg::SymMatrix;
use crate::panel::{ObservedFactors, ReturnPanel};
use crate::saf::CovarianceEstimate;

use super::{centered, RESIDUAL_FLOOR};

/// Time-series regressions of every series on observed factors (with intercept).
#[derive(Debug, Clone)]
pub struct FactorModelFit {
    /// `N × q` slopes.
    pub betas: DMatrix<f64>,
    /// `q × q` factor covariance (`1/T`).
    pub factor_cov: SymMatrix,
    /// Residual variances, floored.
    pub resid_var: DVector<f64>,
}

impl FactorModelFit {
    /// `β Σ_F βᵀ + D`.
    pub fn covariance(&self) -> SymMatrix {
        let common = &self.betas * self.factor_cov.as_matrix() * self.betas.transpose();
        SymMatrix::symmetrized(common + DMatrix::from_diagonal(&self.resid_var))
    }
}

pub fn fit_factor_model(panel: &ReturnPanel, factors: &ObservedFactors) -> Result<FactorModelFit> {
    fit_factor_model_raw(&panel.original(), &factors.series)
}

/// Same as [`fit_factor_model`] on an `N × T` block and a `T × q` factor block.
pub(crate) fn fit_factor_model_raw(data: &DMatrix<f64>, series: &DMatrix<f64>) -> Result<FactorModelFit> {
    let t = data.ncols();
    if series.nrows() != t {
        return Err(Error::DimensionMismatch {
            expected: format!("{t} factor observations"),
            got: series.nrows().to_string(),
        });
    }
    let x = centered(data);
    // T × q, demeaned per factor
    let f = centered(&series.transpose()).transpose();
    let q = f.ncols();
    let tf = t as f64;
    let gram = SymMatrix::new(f.transpose() * &f / tf)?;
    if (0..q).any(|k| !(gram[(k, k)] > 0.0)) || !gram.is_positive_definite() {
        return Err(Error::DegenerateInput(
            "observed factors have zero variance or are collinear".into(),
        ));
    }
    let cross = &x * &f / tf; // N × q
    let betas = gram.solve_pd(&cross.transpose())?.transpose();
    let resid = &x - &betas * f.transpose();
    let resid_var = DVector::from_fn(x.nrows(), |i, _| {
        (resid.row(i).norm_squared() / tf).max(RESIDUAL_FLOOR)
    });
    Ok(FactorModelFit { betas, factor_cov: gram, resid_var })
}

/// Single-index covariance `β̂ σ̂_f β̂ᵀ + D̂`.
pub fn sim_cov(panel: &ReturnPanel, factors: &ObservedFactors) -> Result<CovarianceEstimate> {
    factors.require(1, "SIM", panel.n_periods())?;
    let fit = fit_factor_model(panel, factors)?;
    Ok(CovarianceEstimate::new(fit.covariance(), EstimatorId::Sim))
}

/// Three-factor covariance `β̂ Σ̂_F β̂ᵀ + D̂`.
pub fn ff3f_cov(panel: &ReturnPanel, factors: &ObservedFactors) -> Result<CovarianceEstimate> {
    factors.require(3, "FF3F", panel.n_periods())?;
    let fit = fit_factor_model(panel, factors)?;
    Ok(CovarianceEstimate::new(fit.covariance(), EstimatorId::Ff3f))
}
