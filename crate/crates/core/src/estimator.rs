//! String-keyed registry of covariance estimators.
//!
//! Every estimator consumes a [`ReturnPanel`] (plus optional observed factors)
//! and produces either a covariance matrix in the panel's original units, a
//! precision matrix (KDM), or the equal-weight rule.

use std::fmt;
use std::str::FromStr;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::SymMatrix;
use crate::panel::{ObservedFactors, ReturnPanel};
use crate::portfolio::{gmvp_weights, gmvp_weights_from_precision};
use crate::rivals::{self, BtConfig, KdmConfig, StConfig};
use crate::saf::{assemble_saf_covariance, fit_saf, CovarianceEstimate, SafConfig};
use crate::selection::{select_mu_with, select_num_factors, MuSearchConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum EstimatorId {
    EqualWeight,
    Sample,
    Saf,
    Lw,
    Kdm,
    Adz,
    St,
    Bt,
    Sim,
    Ff3f,
}

impl EstimatorId {
    pub const ALL: [EstimatorId; 10] = [
        EstimatorId::EqualWeight,
        EstimatorId::Sample,
        EstimatorId::Saf,
        EstimatorId::Lw,
        EstimatorId::Kdm,
        EstimatorId::Adz,
        EstimatorId::St,
        EstimatorId::Bt,
        EstimatorId::Sim,
        EstimatorId::Ff3f,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            EstimatorId::EqualWeight => "1/n",
            EstimatorId::Sample => "sample",
            EstimatorId::Saf => "saf",
            EstimatorId::Lw => "lw",
            EstimatorId::Kdm => "kdm",
            EstimatorId::Adz => "adz",
            EstimatorId::St => "st",
            EstimatorId::Bt => "bt",
            EstimatorId::Sim => "sim",
            EstimatorId::Ff3f => "ff3f",
        }
    }

    /// Whether the estimator consumes observed factor series.
    pub fn uses_factors(self) -> bool {
        matches!(self, EstimatorId::Lw | EstimatorId::Kdm | EstimatorId::Sim | EstimatorId::Ff3f)
    }

    /// Parses a comma-separated list such as `saf,sample,st`.
    pub fn parse_list(list: &str) -> Result<Vec<EstimatorId>> {
        list.split(',').map(str::trim).filter(|s| !s.is_empty()).map(str::parse).collect()
    }
}

impl fmt::Display for EstimatorId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EstimatorId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let id = match s.to_ascii_lowercase().as_str() {
            "1/n" | "ew" | "equal" | "equal_weight" => EstimatorId::EqualWeight,
            "sample" => EstimatorId::Sample,
            "saf" => EstimatorId::Saf,
            "lw" => EstimatorId::Lw,
            "kdm" => EstimatorId::Kdm,
            "adz" => EstimatorId::Adz,
            "st" => EstimatorId::St,
            "bt" => EstimatorId::Bt,
            "sim" => EstimatorId::Sim,
            "ff3f" | "ff3" => EstimatorId::Ff3f,
            other => return Err(Error::InvalidArgument(format!("unknown estimator '{other}'"))),
        };
        Ok(id)
    }
}

/// How the SAF estimator picks `r` and `μ` when they are not fixed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SafSettings {
    /// Fixed number of factors; `None` selects it from the eigenvalue gaps.
    pub r: Option<usize>,
    /// Fixed penalty; `None` minimizes the information criterion over a grid.
    pub mu: Option<f64>,
    pub r_max: usize,
    pub grid_size: usize,
    pub base: SafConfig,
}

impl Default for SafSettings {
    fn default() -> Self {
        Self { r: None, mu: None, r_max: 8, grid_size: 30, base: SafConfig::default() }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EstimatorSettings {
    pub saf: SafSettings,
    pub st: StConfig,
    pub bt: BtConfig,
    pub kdm: KdmConfig,
    /// ADZ split point; `None` means `⌊T/2⌋`.
    pub adz_split: Option<usize>,
}

/// What an estimator hands to downstream consumers.
#[derive(Debug, Clone)]
pub enum EstimatorOutput {
    Covariance(CovarianceEstimate),
    Precision { matrix: SymMatrix, zeta: [f64; 3] },
    EqualWeight { n: usize },
}

impl EstimatorOutput {
    pub fn gmvp_weights(&self) -> Result<DVector<f64>> {
        match self {
            EstimatorOutput::Covariance(c) => gmvp_weights(&c.matrix),
            EstimatorOutput::Precision { matrix, .. } => gmvp_weights_from_precision(matrix),
            EstimatorOutput::EqualWeight { n } => Ok(DVector::from_element(*n, 1.0 / *n as f64)),
        }
    }

    /// A covariance matrix for scoring; precision outputs are inverted.
    pub fn covariance(&self) -> Result<SymMatrix> {
        match self {
            EstimatorOutput::Covariance(c) => Ok(c.matrix.clone()),
            EstimatorOutput::Precision { matrix, .. } => matrix.inverse_pd(),
            EstimatorOutput::EqualWeight { .. } => Err(Error::InvalidArgument(
                "the 1/N rule does not produce a covariance matrix".into(),
            )),
        }
    }
}

/// Data handed to an estimator.
#[derive(Debug, Clone, Copy)]
pub struct EstimationInput<'a> {
    pub panel: &'a ReturnPanel,
    pub factors: Option<&'a ObservedFactors>,
    /// Seed for cross-validation splits.
    pub seed: u64,
}

/// Anything that can turn a panel into a covariance-type output.
pub trait CovarianceEstimator: Send + Sync {
    fn name(&self) -> String;
    fn estimate(&self, input: &EstimationInput<'_>) -> Result<EstimatorOutput>;
}

/// An [`EstimatorId`] bound to its settings.
#[derive(Debug, Clone)]
pub struct Registered {
    pub id: EstimatorId,
    pub settings: EstimatorSettings,
}

impl Registered {
    pub fn new(id: EstimatorId, settings: EstimatorSettings) -> Self {
        Self { id, settings }
    }
}

/// Builds boxed estimators for a list of ids sharing one settings block.
pub fn build_estimators(
    ids: &[EstimatorId],
    settings: &EstimatorSettings,
) -> Vec<Box<dyn CovarianceEstimator>> {
    ids.iter()
        .map(|&id| Box::new(Registered::new(id, settings.clone())) as Box<dyn CovarianceEstimator>)
        .collect()
}

fn factors_or_proxy(input: &EstimationInput<'_>, q: usize) -> Result<ObservedFactors> {
    match input.factors {
        Some(f) if q == 1 => Ok(f.leading(1)),
        Some(f) => Ok(f.clone()),
        None if q == 1 => Ok(ObservedFactors::market_proxy(input.panel)),
        None => Err(Error::InvalidArgument(format!("{q} observed factors required"))),
    }
}

impl CovarianceEstimator for Registered {
    fn name(&self) -> String {
        self.id.as_str().to_string()
    }

    fn estimate(&self, input: &EstimationInput<'_>) -> Result<EstimatorOutput> {
        let panel = input.panel;
        let s = &self.settings;
        let cov = match self.id {
            EstimatorId::EqualWeight => {
                return Ok(EstimatorOutput::EqualWeight { n: panel.n_series() })
            }
            EstimatorId::Sample => rivals::sample_cov(panel),
            EstimatorId::Saf => saf_estimate(panel, &s.saf)?,
            EstimatorId::Lw => rivals::lw_shrinkage(panel, &factors_or_proxy(input, 1)?)?.0,
            EstimatorId::Kdm => {
                let out = rivals::kdm_precision(panel, &factors_or_proxy(input, 1)?, &s.kdm)?;
                return Ok(EstimatorOutput::Precision {
                    matrix: out.precision,
                    zeta: out.diagnostics.zeta,
                });
            }
            EstimatorId::Adz => {
                let split = s.adz_split.unwrap_or(panel.n_periods() / 2);
                rivals::adz_design_free(panel, split)?
            }
            EstimatorId::St => rivals::st_threshold_cov(panel, &s.st, input.seed)?.estimate,
            EstimatorId::Bt => rivals::bt_cross_validated(panel, &s.bt, input.seed)?.estimate,
            EstimatorId::Sim => rivals::sim_cov(panel, &factors_or_proxy(input, 1)?)?,
            EstimatorId::Ff3f => rivals::ff3f_cov(panel, &factors_or_proxy(input, 3)?)?,
        };
        Ok(EstimatorOutput::Covariance(cov))
    }
}

/// Full SAF pipeline: choose `r` and `μ` if needed, fit, assemble, and map
/// back to the panel's original units.
pub fn saf_estimate(panel: &ReturnPanel, settings: &SafSettings) -> Result<CovarianceEstimate> {
    let (n, t) = (panel.n_series(), panel.n_periods());
    let mut r_hat = f64::NAN;
    let (r, full_rank_only) = match settings.r {
        Some(r) => (r, true),
        None => {
            let room = n.min(t).saturating_sub(6);
            let r_max = settings.r_max.min(room);
            if r_max == 0 {
                (1, true)
            } else {
                let sel = select_num_factors(panel, r_max)?;
                r_hat = sel.r_hat as f64;
                // no detected factor: one candidate column that the criterion may drop
                (sel.r_hat.max(1), sel.r_hat > 0)
            }
        }
    };
    let base = SafConfig { r, ..settings.base.clone() };
    let fit = match settings.mu {
        Some(mu) => fit_saf(panel, &SafConfig { mu, ..base })?,
        None => {
            let search =
                MuSearchConfig { grid_size: settings.grid_size, full_rank_only, base, ..Default::default() };
            select_mu_with(panel, &search)?.fit
        }
    };
    let est = assemble_saf_covariance(&fit)?;
    let mut out = CovarianceEstimate {
        matrix: panel.to_original_scale(&est.matrix),
        ..est
    };
    out.positive_definite = out.matrix.is_positive_definite();
    if !out.positive_definite {
        return Err(Error::NotPositiveDefinite { min_eigenvalue: out.matrix.eigenvalues()?.min() });
    }
    if r_hat.is_finite() {
        out.params.insert("r_hat".into(), r_hat);
    }
    Ok(out)
}
