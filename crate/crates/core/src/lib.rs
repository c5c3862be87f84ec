//! Covariance estimation for high-dimensional return panels.
//!
//! The centerpiece is the sparse approximate factor (SAF) estimator: an
//! l1-penalized quasi-maximum-likelihood factor model whose loadings are
//! fitted by a majorize-minimize loop, whose factors are recovered by GLS and
//! whose idiosyncratic covariance is soft-thresholded. Around it sit the usual
//! rival estimators, a Monte Carlo lab for the standard simulation designs and
//! a rolling-window global-minimum-variance backtester.

pub mod error;
pub mod estimator;
pub mod linalg;
pub mod panel;
pub mod portfolio;
pub mod rivals;
pub mod saf;
pub mod selection;
pub mod simulation;

pub use error::{Error, Result};
pub use estimator::{EstimatorId, EstimatorOutput, EstimatorSettings};
pub use linalg::{EigenPair, SymMatrix};
pub use panel::{ObservedFactors, ReturnPanel};
pub use saf::{CovarianceEstimate, FactorFit, SafConfig};
