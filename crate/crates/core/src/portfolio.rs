//! Global minimum-variance portfolios and the rolling-window backtest.

use log::{info, warn};
use nalgebra::{DMatrix, DVector};
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimator::{
    build_estimators, CovarianceEstimator, EstimationInput, EstimatorId, EstimatorSettings,
};
use crate::linalg::SymMatrix;
use crate::panel::{ObservedFactors, ReturnPanel};

fn normalize(raw: DVector<f64>) -> Result<DVector<f64>> {
    let denom = raw.sum();
    if !(denom > 0.0) || !denom.is_finite() {
        return Err(Error::NumericalBreakdown(format!("1'Σ⁻¹1 = {denom} is not positive")));
    }
    Ok(raw / denom)
}

/// `Σ⁻¹1 / (1ᵀΣ⁻¹1)`.
pub fn gmvp_weights(sigma: &SymMatrix) -> Result<DVector<f64>> {
    let n = sigma.dim();
    let chol = sigma
        .as_matrix()
        .clone()
        .cholesky()
        .ok_or(Error::NotPositiveDefinite { min_eigenvalue: f64::NAN })?;
    normalize(chol.solve(&DVector::from_element(n, 1.0)))
}

/// `P1 / (1ᵀP1)` for a precision matrix `P`.
pub fn gmvp_weights_from_precision(precision: &SymMatrix) -> Result<DVector<f64>> {
    let n = precision.dim();
    normalize(precision.as_matrix() * DVector::from_element(n, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub sd: f64,
    pub av: f64,
    pub ce: f64,
    /// Missing when the series has zero variance.
    pub sr: Option<f64>,
}

/// Annualized SD, mean, certainty equivalent `AV − (γ/2) SD²` and Sharpe ratio.
/// The mean uses divisor `n`, the variance `n − 1`.
pub fn performance_metrics(returns: &[f64], periods: usize, gamma: f64) -> Result<Metrics> {
    let n = returns.len();
    if n < 2 {
        return Err(Error::InsufficientDimensions(format!("{n} returns; need >= 2")));
    }
    let mean = returns.iter().sum::<f64>() / n as f64;
    let constant = returns.iter().all(|r| *r == returns[0]);
    let var = if constant {
        0.0
    } else {
        returns.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (n - 1) as f64
    };
    let p = periods as f64;
    let av = p * mean;
    let sd = p.sqrt() * var.sqrt();
    let sr = if sd > 0.0 { Some(av / sd) } else { None };
    Ok(Metrics { sd, av, ce: av - 0.5 * gamma * sd * sd, sr })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeightStats {
    pub min: f64,
    pub max: f64,
    pub sd: f64,
    pub mad: f64,
}

/// Pooled min, max, standard deviation (`n − 1`) and mean absolute deviation
/// of every weight over all periods.
pub fn weight_summary(weights: &[DVector<f64>]) -> Result<WeightStats> {
    let pooled: Vec<f64> = weights.iter().flat_map(|w| w.iter().copied()).collect();
    let n = pooled.len();
    if n == 0 {
        return Err(Error::InvalidArgument("no weights to summarize".into()));
    }
    let mean = pooled.iter().sum::<f64>() / n as f64;
    let min = pooled.iter().copied().fold(f64::INFINITY, f64::min);
    let max = pooled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sd = if n > 1 {
        (pooled.iter().map(|w| (w - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
    } else {
        0.0
    };
    let mad = pooled.iter().map(|w| (w - mean).abs()).sum::<f64>() / n as f64;
    Ok(WeightStats { min, max, sd, mad })
}

/// Annualized SD of `returns[..t]` for `t = start..=len`.
pub fn expanding_sd_series(returns: &[f64], start: usize, periods: usize) -> Result<Vec<f64>> {
    if start < 2 {
        return Err(Error::InvalidArgument("expanding SD needs start >= 2".into()));
    }
    (start..=returns.len())
        .map(|t| performance_metrics(&returns[..t], periods, 0.0).map(|m| m.sd))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BacktestConfig {
    pub window_h: usize,
    pub subset_sizes: Vec<usize>,
    pub n_repeats: usize,
    pub seed: u64,
    pub estimators: Vec<EstimatorId>,
    pub annualization_periods: usize,
    pub risk_aversion_gamma: f64,
    pub settings: EstimatorSettings,
}

impl Default for BacktestConfig {
    fn default() -> Self {
        Self {
            window_h: 60,
            subset_sizes: vec![30, 50, 100, 200],
            n_repeats: 100,
            seed: 0,
            estimators: vec![EstimatorId::EqualWeight, EstimatorId::Sample, EstimatorId::Saf],
            annualization_periods: 12,
            risk_aversion_gamma: 1.0,
            settings: EstimatorSettings::default(),
        }
    }
}

/// Excess returns (`N × T`, `NaN` marks a missing value) with labels and
/// optional observed factors aligned to the same dates.
#[derive(Debug, Clone)]
pub struct BacktestData {
    pub returns: DMatrix<f64>,
    pub assets: Vec<String>,
    pub dates: Vec<String>,
    pub factors: Option<ObservedFactors>,
}

impl BacktestData {
    /// Subtracts the risk-free rate, when given, from every asset return.
    pub fn new(
        mut returns: DMatrix<f64>,
        assets: Vec<String>,
        dates: Vec<String>,
        riskfree: Option<&[f64]>,
        factors: Option<ObservedFactors>,
    ) -> Result<Self> {
        let (n, t) = returns.shape();
        if assets.len() != n || dates.len() != t {
            return Err(Error::DimensionMismatch {
                expected: format!("{n} assets and {t} dates"),
                got: format!("{} and {}", assets.len(), dates.len()),
            });
        }
        if let Some(rf) = riskfree {
            if rf.len() != t {
                return Err(Error::DimensionMismatch {
                    expected: format!("{t} risk-free observations"),
                    got: rf.len().to_string(),
                });
            }
            for (s, mut col) in returns.column_iter_mut().enumerate() {
                col.add_scalar_mut(-rf[s]);
            }
        }
        if let Some(f) = &factors {
            if f.n_periods() != t {
                return Err(Error::DimensionMismatch {
                    expected: format!("{t} factor observations"),
                    got: f.n_periods().to_string(),
                });
            }
        }
        Ok(Self { returns, assets, dates, factors })
    }

    /// Assets observed at every date.
    pub fn complete_assets(&self) -> Vec<usize> {
        (0..self.returns.nrows())
            .filter(|&i| self.returns.row(i).iter().all(|v| v.is_finite()))
            .collect()
    }
}

/// Asset subset of one repeat; depends only on `(seed, repeat, size)`.
pub fn draw_subset(seed: u64, repeat: usize, size: usize, eligible: &[usize]) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (size as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    rng.set_stream(repeat as u64);
    let mut picked: Vec<usize> = index::sample(&mut rng, eligible.len(), size)
        .into_iter()
        .map(|k| eligible[k])
        .collect();
    picked.sort_unstable();
    picked
}

/// One (estimator, size, repeat) cell.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CellResult {
    pub estimator: String,
    pub size: usize,
    pub repeat: usize,
    pub assets: Vec<usize>,
    /// Out-of-sample excess returns, length `T − h` when the cell succeeded.
    pub returns: Vec<f64>,
    #[serde(skip)]
    pub weights: Vec<DVector<f64>>,
    pub metrics: Option<Metrics>,
    pub weight_stats: Option<WeightStats>,
    pub error: Option<String>,
}

/// Averages over the successful repeats of one (estimator, size) pair.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AggregateRow {
    pub estimator: String,
    pub size: usize,
    pub sd: f64,
    pub av: f64,
    pub ce: f64,
    pub sr: Option<f64>,
    pub weights: Option<WeightStats>,
    pub n_ok: usize,
    pub n_failed: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BacktestReport {
    pub config: BacktestConfig,
    pub dates: Vec<String>,
    pub cells: Vec<CellResult>,
    pub aggregates: Vec<AggregateRow>,
}

impl BacktestReport {
    /// Expanding-window SD per (estimator, size), averaged over the
    /// successful repeats.
    pub fn expanding_sd(&self, start: usize) -> Result<Vec<(String, usize, Vec<f64>)>> {
        let mut out = Vec::new();
        for row in &self.aggregates {
            let series: Vec<Vec<f64>> = self
                .cells
                .iter()
                .filter(|c| c.estimator == row.estimator && c.size == row.size && c.error.is_none())
                .map(|c| expanding_sd_series(&c.returns, start, self.config.annualization_periods))
                .collect::<Result<_>>()?;
            if series.is_empty() {
                continue;
            }
            let len = series[0].len();
            let mean = (0..len)
                .map(|k| series.iter().map(|s| s[k]).sum::<f64>() / series.len() as f64)
                .collect();
            out.push((row.estimator.clone(), row.size, mean));
        }
        Ok(out)
    }
}

fn aggregate(cells: &[CellResult], estimators: &[String], sizes: &[usize]) -> Vec<AggregateRow> {
    let mut rows = Vec::new();
    for name in estimators {
        for &size in sizes {
            let group: Vec<&CellResult> =
                cells.iter().filter(|c| &c.estimator == name && c.size == size).collect();
            let ok: Vec<&CellResult> = group.iter().copied().filter(|c| c.error.is_none()).collect();
            let mean = |f: &dyn Fn(&Metrics) -> f64| {
                ok.iter().map(|c| f(c.metrics.as_ref().unwrap())).sum::<f64>() / ok.len() as f64
            };
            let srs: Vec<f64> = ok.iter().filter_map(|c| c.metrics.unwrap().sr).collect();
            let weights = if ok.is_empty() {
                None
            } else {
                let k = ok.len() as f64;
                let ws: Vec<WeightStats> = ok.iter().filter_map(|c| c.weight_stats).collect();
                Some(WeightStats {
                    min: ws.iter().map(|w| w.min).sum::<f64>() / k,
                    max: ws.iter().map(|w| w.max).sum::<f64>() / k,
                    sd: ws.iter().map(|w| w.sd).sum::<f64>() / k,
                    mad: ws.iter().map(|w| w.mad).sum::<f64>() / k,
                })
            };
            rows.push(AggregateRow {
                estimator: name.clone(),
                size,
                sd: if ok.is_empty() { f64::NAN } else { mean(&|m| m.sd) },
                av: if ok.is_empty() { f64::NAN } else { mean(&|m| m.av) },
                ce: if ok.is_empty() { f64::NAN } else { mean(&|m| m.ce) },
                sr: if srs.is_empty() { None } else { Some(srs.iter().sum::<f64>() / srs.len() as f64) },
                weights,
                n_ok: ok.len(),
                n_failed: group.len() - ok.len(),
            });
        }
    }
    rows
}

fn run_cell(
    data: &BacktestData,
    cfg: &BacktestConfig,
    estimator: &dyn CovarianceEstimator,
    size: usize,
    repeat: usize,
    assets: Vec<usize>,
) -> CellResult {
    let h = cfg.window_h;
    let t_total = data.returns.ncols();
    let sub = data.returns.select_rows(&assets);
    let labels: Vec<String> = assets.iter().map(|&i| data.assets[i].clone()).collect();
    let mut returns = Vec::with_capacity(t_total - h);
    let mut weights = Vec::with_capacity(t_total - h);
    let mut error = None;
    for t in h..t_total {
        let window = sub.columns(t - h, h).into_owned();
        let dates = data.dates[t - h..t].to_vec();
        let factors = data.factors.as_ref().map(|f| f.slice_periods(t - h, t));
        let step = ReturnPanel::from_raw(window, labels.clone(), dates).and_then(|panel| {
            let input = EstimationInput {
                panel: &panel,
                factors: factors.as_ref(),
                seed: cfg.seed.wrapping_add(t as u64),
            };
            estimator.estimate(&input)?.gmvp_weights()
        });
        match step {
            Ok(w) => {
                returns.push(w.dot(&sub.column(t)));
                weights.push(w);
            }
            Err(e) => {
                error = Some(format!("window ending {}: {e}", data.dates[t - 1]));
                break;
            }
        }
    }
    let name = estimator.name();
    if let Some(e) = &error {
        warn!("{name} (size {size}, repeat {repeat}) failed: {e}");
        return CellResult {
            estimator: name,
            size,
            repeat,
            assets,
            returns,
            weights,
            metrics: None,
            weight_stats: None,
            error,
        };
    }
    let metrics = performance_metrics(&returns, cfg.annualization_periods, cfg.risk_aversion_gamma);
    let weight_stats = weight_summary(&weights).ok();
    match metrics {
        Ok(m) => CellResult {
            estimator: name,
            size,
            repeat,
            assets,
            returns,
            weights,
            metrics: Some(m),
            weight_stats,
            error: None,
        },
        Err(e) => CellResult {
            estimator: name,
            size,
            repeat,
            assets,
            returns,
            weights,
            metrics: None,
            weight_stats,
            error: Some(e.to_string()),
        },
    }
}

/// Rolling-window GMVP backtest with the registered estimators of `cfg`.
pub fn run_backtest(data: &BacktestData, cfg: &BacktestConfig) -> Result<BacktestReport> {
    let estimators = build_estimators(&cfg.estimators, &cfg.settings);
    run_backtest_with(data, cfg, &estimators)
}

/// Rolling-window GMVP backtest with arbitrary estimators. Cells run in
/// parallel; each cell walks its windows in order.
pub fn run_backtest_with(
    data: &BacktestData,
    cfg: &BacktestConfig,
    estimators: &[Box<dyn CovarianceEstimator>],
) -> Result<BacktestReport> {
    let t = data.returns.ncols();
    if cfg.window_h < 2 || cfg.window_h >= t {
        return Err(Error::InvalidArgument(format!(
            "window {} must lie in [2, T) with T = {t}",
            cfg.window_h
        )));
    }
    if estimators.is_empty() || cfg.subset_sizes.is_empty() || cfg.n_repeats == 0 {
        return Err(Error::InvalidArgument("need estimators, subset sizes and repeats".into()));
    }
    let eligible = data.complete_assets();
    let dropped = data.returns.nrows() - eligible.len();
    if dropped > 0 {
        info!("{dropped} assets with missing observations are excluded from every subset");
    }
    if let Some(&size) = cfg.subset_sizes.iter().find(|&&s| s == 0 || s > eligible.len()) {
        return Err(Error::InvalidArgument(format!(
            "subset size {size} exceeds the {} complete assets",
            eligible.len()
        )));
    }

    let mut jobs = Vec::new();
    for (e, _) in estimators.iter().enumerate() {
        for &size in &cfg.subset_sizes {
            for repeat in 0..cfg.n_repeats {
                jobs.push((e, size, repeat));
            }
        }
    }
    let cells: Vec<CellResult> = jobs
        .par_iter()
        .map(|&(e, size, repeat)| {
            let assets = draw_subset(cfg.seed, repeat, size, &eligible);
            run_cell(data, cfg, estimators[e].as_ref(), size, repeat, assets)
        })
        .collect();
    let names: Vec<String> = estimators.iter().map(|e| e.name()).collect();
    let aggregates = aggregate(&cells, &names, &cfg.subset_sizes);
    Ok(BacktestReport { config: cfg.clone(), dates: data.dates[cfg.window_h..].to_vec(), cells, aggregates })
}
