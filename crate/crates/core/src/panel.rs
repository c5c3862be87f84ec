//! Observation panels and observed factor series.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{second_moment, SymMatrix};

/// `N × T` panel of observations, one row per series.
///
/// When standardized, `data` holds demeaned series scaled to unit variance
/// (divisor `T`), and `center`/`scale` keep what was removed so covariance
/// estimates can be mapped back to the original units.
#[derive(Debug, Clone, PartialEq)]
pub struct ReturnPanel {
    data: DMatrix<f64>,
    center: DVector<f64>,
    scale: DVector<f64>,
    assets: Vec<String>,
    dates: Vec<String>,
}

fn default_labels(prefix: &str, n: usize) -> Vec<String> {
    (0..n).map(|i| format!("{prefix}{}", i + 1)).collect()
}

impl ReturnPanel {
    /// Demeans and standardizes every row of `raw`.
    pub fn from_raw(raw: DMatrix<f64>, assets: Vec<String>, dates: Vec<String>) -> Result<Self> {
        Self::check_shape(&raw, &assets, &dates)?;
        let (n, t) = raw.shape();
        let mut data = raw;
        let mut center = DVector::zeros(n);
        let mut scale = DVector::zeros(n);
        for i in 0..n {
            let mut row = data.row_mut(i);
            let mean = row.mean();
            row.add_scalar_mut(-mean);
            let var = row.norm_squared() / t as f64;
            if !(var > 0.0) || !var.is_finite() {
                return Err(Error::DegenerateInput(format!(
                    "series '{}' has zero or non-finite variance",
                    assets[i]
                )));
            }
            let sd = var.sqrt();
            row /= sd;
            center[i] = mean;
            scale[i] = sd;
        }
        Ok(Self { data, center, scale, assets, dates })
    }

    /// Keeps the observations as given (no demeaning, unit scales).
    pub fn from_raw_unscaled(
        raw: DMatrix<f64>,
        assets: Vec<String>,
        dates: Vec<String>,
    ) -> Result<Self> {
        Self::check_shape(&raw, &assets, &dates)?;
        let n = raw.nrows();
        Ok(Self {
            data: raw,
            center: DVector::zeros(n),
            scale: DVector::from_element(n, 1.0),
            assets,
            dates,
        })
    }

    /// Standardized panel with generated labels `x1..xN`, `t1..tT`.
    pub fn standardized(raw: DMatrix<f64>) -> Result<Self> {
        let (n, t) = raw.shape();
        Self::from_raw(raw, default_labels("x", n), default_labels("t", t))
    }

    fn check_shape(raw: &DMatrix<f64>, assets: &[String], dates: &[String]) -> Result<()> {
        let (n, t) = raw.shape();
        if n == 0 || t < 2 {
            return Err(Error::InsufficientDimensions(format!(
                "panel needs N >= 1 and T >= 2, got {n}x{t}"
            )));
        }
        if assets.len() != n || dates.len() != t {
            return Err(Error::DimensionMismatch {
                expected: format!("{n} asset labels and {t} dates"),
                got: format!("{} and {}", assets.len(), dates.len()),
            });
        }
        if raw.iter().any(|v| !v.is_finite()) {
            return Err(Error::DegenerateInput("panel contains non-finite values".into()));
        }
        Ok(())
    }

    pub fn n_series(&self) -> usize {
        self.data.nrows()
    }

    pub fn n_periods(&self) -> usize {
        self.data.ncols()
    }

    /// The (standardized) observations.
    pub fn data(&self) -> &DMatrix<f64> {
        &self.data
    }

    pub fn center(&self) -> &DVector<f64> {
        &self.center
    }

    pub fn scale(&self) -> &DVector<f64> {
        &self.scale
    }

    pub fn assets(&self) -> &[String] {
        &self.assets
    }

    pub fn dates(&self) -> &[String] {
        &self.dates
    }

    /// Demeaned observations in original units.
    pub fn original(&self) -> DMatrix<f64> {
        let mut out = self.data.clone();
        for (i, mut row) in out.row_iter_mut().enumerate() {
            row *= self.scale[i];
        }
        out
    }

    /// Observations exactly as supplied to the constructor.
    pub fn raw(&self) -> DMatrix<f64> {
        let mut out = self.original();
        for (i, mut row) in out.row_iter_mut().enumerate() {
            row.add_scalar_mut(self.center[i]);
        }
        out
    }

    /// `S_x = (1/T) Σ_t x_t x_tᵀ` of the stored (standardized) observations.
    pub fn sample_cov(&self) -> SymMatrix {
        second_moment(&self.data)
    }

    /// Maps a covariance estimate of the stored observations back to the
    /// original units, `D Σ D`.
    pub fn to_original_scale(&self, sigma: &SymMatrix) -> SymMatrix {
        sigma.congruence_diag(&self.scale)
    }

    /// Rows `idx` of the panel, keeping their standardization.
    pub fn select_series(&self, idx: &[usize]) -> Self {
        let data = DMatrix::from_fn(idx.len(), self.n_periods(), |i, t| self.data[(idx[i], t)]);
        Self {
            data,
            center: DVector::from_iterator(idx.len(), idx.iter().map(|&i| self.center[i])),
            scale: DVector::from_iterator(idx.len(), idx.iter().map(|&i| self.scale[i])),
            assets: idx.iter().map(|&i| self.assets[i].clone()).collect(),
            dates: self.dates.clone(),
        }
    }
}

/// Observed factor series (`T × q`), e.g. the market excess return for the
/// single-index model or the three Fama-French factors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservedFactors {
    pub series: DMatrix<f64>,
    pub labels: Vec<String>,
}

impl ObservedFactors {
    pub fn new(series: DMatrix<f64>, labels: Vec<String>) -> Result<Self> {
        if labels.len() != series.ncols() {
            return Err(Error::DimensionMismatch {
                expected: format!("{} factor labels", series.ncols()),
                got: labels.len().to_string(),
            });
        }
        Ok(Self { series, labels })
    }

    /// Equal-weighted cross-sectional average of the panel, used as a market
    /// proxy when no observed market factor is available.
    pub fn market_proxy(panel: &ReturnPanel) -> Self {
        let orig = panel.original();
        let t = panel.n_periods();
        let n = panel.n_series() as f64;
        let series = DMatrix::from_fn(t, 1, |s, _| orig.column(s).sum() / n);
        Self { series, labels: vec!["ew_market".into()] }
    }

    pub fn n_factors(&self) -> usize {
        self.series.ncols()
    }

    pub fn n_periods(&self) -> usize {
        self.series.nrows()
    }

    /// Keeps the first `q` factors.
    pub fn leading(&self, q: usize) -> Self {
        let q = q.min(self.n_factors());
        Self {
            series: self.series.columns(0, q).into_owned(),
            labels: self.labels[..q].to_vec(),
        }
    }

    /// Rows `start..end` of every factor series.
    pub fn slice_periods(&self, start: usize, end: usize) -> Self {
        Self {
            series: self.series.rows(start, end - start).into_owned(),
            labels: self.labels.clone(),
        }
    }

    pub(crate) fn require(&self, q: usize, estimator: &str, t: usize) -> Result<()> {
        if self.n_factors() != q {
            return Err(Error::InvalidArgument(format!(
                "{estimator} needs {q} observed factor(s), got {}",
                self.n_factors()
            )));
        }
        if self.n_periods() != t {
            return Err(Error::DimensionMismatch {
                expected: format!("{t} factor observations"),
                got: self.n_periods().to_string(),
            });
        }
        Ok(())
    }
}
