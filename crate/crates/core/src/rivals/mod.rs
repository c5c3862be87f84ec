//! Comparison estimators. All of them work on the demeaned panel in its
//! original units and use the `1/T` divisor.

mod factor_models;
mod shrinkage;
mod sparse;

pub use factor_models::{ff3f_cov, fit_factor_model, sim_cov, FactorModelFit};
pub use shrinkage::{
    adz_design_free, kdm_candidates, kdm_cv_scores, kdm_precision, kdm_with_zeta, lw_shrinkage,
    lw_with_alpha, KdmConfig, KdmOutput,
};
pub use sparse::{
    bt_cross_validated, bt_fit_matrix, bt_objective, bt_sparse_cov, st_cv_scores,
    st_threshold_cov, st_with_kappa, BtConfig, BtFit, CvChoice, StConfig, Tuned,
};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::estimator::EstimatorId;
use crate::linalg::{second_moment, SymMatrix};
use crate::panel::ReturnPanel;
use crate::saf::CovarianceEstimate;

/// Lower bound on residual variances of the observed-factor models.
pub const RESIDUAL_FLOOR: f64 = 1e-8;

/// Tuning values picked by the shrinkage and thresholding estimators.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ShrinkageDiagnostics {
    /// LW weight on `S_x`, in `[0, 1]`.
    pub alpha_star: Option<f64>,
    /// KDM weights on `S_x⁺`, `I` and `Σ_SIM⁻¹`.
    pub zeta: [f64; 3],
    /// ST threshold.
    pub kappa: Option<f64>,
    /// BT penalty.
    pub alpha_n: Option<f64>,
}

/// Row-demeaned observations in original units.
pub(crate) fn centered(data: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = data.clone();
    for mut row in out.row_iter_mut() {
        let mean = row.mean();
        row.add_scalar_mut(-mean);
    }
    out
}

pub(crate) fn panel_centered(panel: &ReturnPanel) -> DMatrix<f64> {
    centered(&panel.original())
}

/// `(1/T) Σ_t (x_t − x̄)(x_t − x̄)ᵀ` of an `N × T` block.
pub(crate) fn cov_of(data: &DMatrix<f64>) -> SymMatrix {
    second_moment(&centered(data))
}

/// Sample covariance with the `1/T` divisor; flagged non-PD when `N ≥ T`.
pub fn sample_cov(panel: &ReturnPanel) -> CovarianceEstimate {
    let s = cov_of(&panel.original());
    let mut est = CovarianceEstimate::new(s, EstimatorId::Sample);
    if panel.n_series() >= panel.n_periods() {
        est.positive_definite = false;
    }
    est
}
