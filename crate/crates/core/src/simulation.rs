//! Monte Carlo designs, panel draws and replicated scoring of estimators.

use std::time::Instant;

use log::warn;
use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{ChiSquared, Distribution as _, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimator::{CovarianceEstimator, EstimationInput};
use crate::linalg::SymMatrix;
use crate::panel::ReturnPanel;

/// Minimum eigenvalue a random design must exceed before it is accepted.
pub const DESIGN_MIN_EIGENVALUE: f64 = 1e-6;
const MAX_REDRAWS: u64 = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DesignKind {
    Uniform,
    Sparse,
    Spiked,
}

impl std::str::FromStr for DesignKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "uniform" => Ok(DesignKind::Uniform),
            "sparse" => Ok(DesignKind::Sparse),
            "spiked" => Ok(DesignKind::Spiked),
            other => Err(Error::InvalidArgument(format!("unknown design '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationDesign {
    pub kind: DesignKind,
    pub n: usize,
    pub t: usize,
    /// Off-diagonal scale of the uniform design (also the noise of the spiked one).
    pub eta: f64,
    /// Nonzero probability of the sparse design.
    pub p: f64,
    pub seed: u64,
}

impl SimulationDesign {
    pub fn uniform(n: usize, t: usize, eta: f64, seed: u64) -> Self {
        Self { kind: DesignKind::Uniform, n, t, eta, p: 0.0, seed }
    }

    pub fn sparse(n: usize, t: usize, p: f64, seed: u64) -> Self {
        Self { kind: DesignKind::Sparse, n, t, eta: 0.0, p, seed }
    }

    pub fn spiked(n: usize, t: usize, eta: f64, seed: u64) -> Self {
        Self { kind: DesignKind::Spiked, n, t, eta, p: 0.0, seed }
    }

    /// The design's free parameter (`η` or `p`).
    pub fn parameter(&self) -> f64 {
        match self.kind {
            DesignKind::Sparse => self.p,
            _ => self.eta,
        }
    }

    /// True covariance drawn from `seed`.
    pub fn covariance(&self, seed: u64) -> Result<SymMatrix> {
        match self.kind {
            DesignKind::Uniform => gen_uniform_design(self.n, self.eta, seed),
            DesignKind::Sparse => gen_sparse_design(self.n, self.p, seed),
            DesignKind::Spiked => Ok(gen_spiked_design(self.n, self.eta, seed)?.sigma),
        }
    }
}

/// SplitMix64 mix of a base seed and an index; used for per-replication streams.
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Draws a unit-diagonal matrix with `draw(rng)` off-diagonals, redrawing
/// with the next seed until it passes the minimum-eigenvalue check.
fn unit_diagonal_design(
    n: usize,
    seed: u64,
    mut draw: impl FnMut(&mut ChaCha8Rng) -> f64,
) -> Result<SymMatrix> {
    for attempt in 0..MAX_REDRAWS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(attempt));
        let mut m = DMatrix::identity(n, n);
        for i in 0..n {
            for j in (i + 1)..n {
                let v = draw(&mut rng);
                m[(i, j)] = v;
                m[(j, i)] = v;
            }
        }
        let s = SymMatrix::new(m)?;
        let min = s.eigenvalues()?.min();
        if min > DESIGN_MIN_EIGENVALUE {
            return Ok(s);
        }
        warn!("design draw with seed {} has min eigenvalue {min:e}; redrawing", seed.wrapping_add(attempt));
    }
    Err(Error::NumericalBreakdown(format!("no positive-definite design after {MAX_REDRAWS} draws")))
}

/// Unit diagonal, off-diagonals `η U(0,1)`.
pub fn gen_uniform_design(n: usize, eta: f64, seed: u64) -> Result<SymMatrix> {
    if !(eta >= 0.0) {
        return Err(Error::InvalidArgument("eta must be nonnegative".into()));
    }
    unit_diagonal_design(n, seed, |rng| eta * rng.random::<f64>())
}

/// Unit diagonal, off-diagonals nonzero with probability `p` and then `U(0, 0.2)`.
pub fn gen_sparse_design(n: usize, p: f64, seed: u64) -> Result<SymMatrix> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::InvalidArgument("p must lie in (0, 1)".into()));
    }
    unit_diagonal_design(n, seed, |rng| {
        let hit = rng.random::<f64>() < p;
        let v = 0.2 * rng.random::<f64>();
        if hit {
            v
        } else {
            0.0
        }
    })
}

/// Spiked covariance `Q diag(r) Qᵀ + Σ_u` and its loadings `Λ₀ = Q diag(√r)`.
#[derive(Debug, Clone)]
pub struct SpikedDesign {
    pub sigma: SymMatrix,
    pub loadings: DMatrix<f64>,
    pub spikes: [f64; 4],
}

/// `(N, N, N^0.8, N^0.5)`.
pub fn spike_sizes(n: usize) -> [f64; 4] {
    let nf = n as f64;
    [nf, nf, nf.powf(0.8), nf.powf(0.5)]
}

/// Two strong and two weak factors on disjoint random supports. The weak
/// factors load on `⌈N^0.8/2⌉` and `⌈N^0.5/2⌉` series; the remaining series are
/// split between the two strong factors. The noise block is the uniform
/// design with parameter `η` (identity when `η = 0`).
pub fn gen_spiked_design(n: usize, eta: f64, seed: u64) -> Result<SpikedDesign> {
    if n < 5 {
        return Err(Error::InsufficientDimensions(format!("spiked design needs N >= 5, got {n}")));
    }
    let nf = n as f64;
    let mut s3 = (nf.powf(0.8) / 2.0).ceil() as usize;
    let mut s4 = (nf.powf(0.5) / 2.0).ceil() as usize;
    while s3 + s4 + 2 > n {
        if s3 >= s4 && s3 > 1 {
            s3 -= 1;
        } else {
            s4 -= 1;
        }
    }
    let rest = n - s3 - s4;
    let s1 = rest / 2;
    let s2 = rest - s1;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows: Vec<usize> = (0..n).collect();
    rows.shuffle(&mut rng);
    let spikes = spike_sizes(n);
    let mut loadings = DMatrix::zeros(n, 4);
    let mut offset = 0;
    for (k, size) in [s1, s2, s3, s4].into_iter().enumerate() {
        let value = (spikes[k] / size as f64).sqrt();
        for &i in &rows[offset..offset + size] {
            let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
            loadings[(i, k)] = sign * value;
        }
        offset += size;
    }
    let noise = if eta == 0.0 { SymMatrix::identity(n) } else { gen_uniform_design(n, eta, derive_seed(seed, 0))? };
    let sigma = SymMatrix::new(&loadings * loadings.transpose() + noise.as_matrix())?;
    Ok(SpikedDesign { sigma, loadings, spikes })
}

/// Factor model `ΛΛᵀ + I` whose `k`-th loading column has `⌈N^{β_k}⌉` random
/// ±1 entries, so its squared norm grows like `N^{β_k}`.
#[derive(Debug, Clone)]
pub struct FactorStrengthDesign {
    pub sigma: SymMatrix,
    pub loadings: DMatrix<f64>,
    pub exponents: Vec<f64>,
}

pub fn gen_factor_strength_design(n: usize, exponents: &[f64], seed: u64) -> Result<FactorStrengthDesign> {
    if exponents.iter().any(|b| !(*b > 0.0 && *b <= 1.0)) {
        return Err(Error::InvalidArgument("factor strengths must lie in (0, 1]".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut loadings = DMatrix::zeros(n, exponents.len());
    for (k, beta) in exponents.iter().enumerate() {
        let size = ((n as f64).powf(*beta).ceil() as usize).min(n);
        let mut rows: Vec<usize> = (0..n).collect();
        rows.shuffle(&mut rng);
        for &i in &rows[..size] {
            loadings[(i, k)] = if rng.random::<bool>() { 1.0 } else { -1.0 };
        }
    }
    let sigma = SymMatrix::new(&loadings * loadings.transpose() + DMatrix::identity(n, n))?;
    Ok(FactorStrengthDesign { sigma, loadings, exponents: exponents.to_vec() })
}

/// `ln π_k(Λᵀ Λ) / ln N` for every column, descending.
pub fn factor_strength_exponents(loadings: &DMatrix<f64>) -> Result<Vec<f64>> {
    let n = loadings.nrows() as f64;
    let gram = SymMatrix::new(loadings.transpose() * loadings)?;
    Ok(gram.eigenvalues()?.iter().map(|v| v.ln() / n.ln()).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Distribution {
    Gaussian,
    /// Multivariate t with five degrees of freedom, unit marginal variance.
    StudentT5,
}

impl std::str::FromStr for Distribution {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "gaussian" | "normal" => Ok(Distribution::Gaussian),
            "t5" | "student-t5" | "studentt5" => Ok(Distribution::StudentT5),
            other => Err(Error::InvalidArgument(format!("unknown distribution '{other}'"))),
        }
    }
}

/// Raw `N × T` draws `x_t = L z_t` with `Σ = L Lᵀ`.
pub fn draw_raw(sigma: &SymMatrix, t: usize, seed: u64, dist: Distribution) -> Result<DMatrix<f64>> {
    sigma.check_positive_definite()?;
    let chol = sigma
        .as_matrix()
        .clone()
        .cholesky()
        .ok_or(Error::NotPositiveDefinite { min_eigenvalue: f64::NAN })?;
    let n = sigma.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut z = DMatrix::<f64>::zeros(n, t);
    for mut col in z.column_iter_mut() {
        for v in col.iter_mut() {
            *v = rng.sample(StandardNormal);
        }
    }
    if dist == Distribution::StudentT5 {
        let chi = ChiSquared::new(5.0).expect("valid degrees of freedom");
        for mut col in z.column_iter_mut() {
            // t5 has variance 5/3; √(3/w) gives unit variance
            let w: f64 = chi.sample(&mut rng);
            col *= (3.0 / w).sqrt();
        }
    }
    Ok(chol.l() * z)
}

/// Standardized panel of `T` i.i.d. draws from `Σ`.
pub fn draw_panel(sigma: &SymMatrix, t: usize, seed: u64, dist: Distribution) -> Result<ReturnPanel> {
    ReturnPanel::standardized(draw_raw(sigma, t, seed, dist)?)
}

/// Losses of one estimator on one replication.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicationScore {
    pub estimator: String,
    /// Squared Frobenius norm `‖Σ̂ − Σ‖_F²`.
    pub frobenius_loss: f64,
    pub spectral_loss: f64,
    /// `N^{-1/2} ‖Σ^{-1/2}(Σ̂ − Σ)Σ^{-1/2}‖_F`.
    pub weighted_loss: f64,
    pub wall_time: f64,
}

/// Loss norms of `estimate` against the truth; `inv_root` is `Σ^{-1/2}`.
pub fn score_estimate(estimate: &SymMatrix, truth: &SymMatrix, inv_root: &SymMatrix) -> Result<(f64, f64, f64)> {
    let diff = estimate.sub(truth);
    let frob = diff.as_matrix().norm_squared();
    let spectral = crate::linalg::spectral_norm(&diff)?;
    let inner = inv_root.as_matrix() * diff.as_matrix() * inv_root.as_matrix();
    let weighted = inner.norm() / (truth.dim() as f64).sqrt();
    Ok((frob, spectral, weighted))
}

/// `(1/N) ‖Λ̂ − Λ₀‖_F²` after matching columns of `est` to `truth` by
/// permutation and sign. Missing columns count as zero.
pub fn aligned_loading_loss(est: &DMatrix<f64>, truth: &DMatrix<f64>) -> f64 {
    let n = truth.nrows();
    let k = est.ncols().max(truth.ncols());
    let pad = |m: &DMatrix<f64>| {
        let mut out = DMatrix::zeros(n, k);
        out.columns_mut(0, m.ncols()).copy_from(m);
        out
    };
    let (e, t) = (pad(est), pad(truth));
    // cost[a][b]: best signed squared distance of est column a to truth column b
    let cost: Vec<Vec<f64>> = (0..k)
        .map(|a| {
            (0..k)
                .map(|b| {
                    let plus = (e.column(a) - t.column(b)).norm_squared();
                    let minus = (e.column(a) + t.column(b)).norm_squared();
                    plus.min(minus)
                })
                .collect()
        })
        .collect();
    best_assignment(&cost) / n as f64
}

/// Minimum-cost perfect matching; exhaustive for small sizes, greedy beyond.
fn best_assignment(cost: &[Vec<f64>]) -> f64 {
    let k = cost.len();
    if k == 0 {
        return 0.0;
    }
    if k <= 8 {
        let mut best = f64::INFINITY;
        let mut perm: Vec<usize> = (0..k).collect();
        permute(&mut perm, 0, cost, &mut best);
        best
    } else {
        let mut used = vec![false; k];
        let mut total = 0.0;
        for row in cost {
            let (j, v) = row
                .iter()
                .enumerate()
                .filter(|(j, _)| !used[*j])
                .min_by(|a, b| a.1.total_cmp(b.1))
                .expect("a free column remains");
            used[j] = true;
            total += v;
        }
        total
    }
}

fn permute(perm: &mut Vec<usize>, start: usize, cost: &[Vec<f64>], best: &mut f64) {
    if start == perm.len() {
        let total: f64 = perm.iter().enumerate().map(|(a, &b)| cost[a][b]).sum();
        if total < *best {
            *best = total;
        }
        return;
    }
    for i in start..perm.len() {
        perm.swap(start, i);
        permute(perm, start + 1, cost, best);
        perm.swap(start, i);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StudyConfig {
    pub reps: usize,
    pub dist: Distribution,
    /// Draw a new true covariance for every replication.
    pub redraw_sigma: bool,
}

impl Default for StudyConfig {
    fn default() -> Self {
        Self { reps: 200, dist: Distribution::Gaussian, redraw_sigma: false }
    }
}

/// Summary of one estimator over all replications.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyRow {
    pub estimator: String,
    pub mean: f64,
    pub median: f64,
    pub stderr: f64,
    pub mean_spectral: f64,
    pub mean_weighted: f64,
    pub n_ok: usize,
    pub n_failed: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StudyTable {
    pub design: SimulationDesign,
    pub config: StudyConfig,
    pub rows: Vec<StudyRow>,
    /// `scores[rep][estimator]`; `None` marks a failed fit.
    pub scores: Vec<Vec<Option<ReplicationScore>>>,
    /// `(rep, estimator, message)` for every failure.
    pub failures: Vec<(usize, String, String)>,
}

fn summarize(name: &str, values: &[&ReplicationScore], failed: usize) -> StudyRow {
    let k = values.len();
    let mut losses: Vec<f64> = values.iter().map(|s| s.frobenius_loss).collect();
    let mean = losses.iter().sum::<f64>() / k as f64;
    let var = if k > 1 { losses.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (k - 1) as f64 } else { 0.0 };
    losses.sort_by(f64::total_cmp);
    let median = if k == 0 {
        f64::NAN
    } else if k % 2 == 1 {
        losses[k / 2]
    } else {
        0.5 * (losses[k / 2 - 1] + losses[k / 2])
    };
    StudyRow {
        estimator: name.to_string(),
        mean,
        median,
        stderr: (var / k as f64).sqrt(),
        mean_spectral: values.iter().map(|s| s.spectral_loss).sum::<f64>() / k as f64,
        mean_weighted: values.iter().map(|s| s.weighted_loss).sum::<f64>() / k as f64,
        n_ok: k,
        n_failed: failed,
    }
}

/// Replicated scoring of every estimator on panels drawn from the design.
/// Replication `k` draws its panel from `derive_seed(seed, k)`, so results
/// do not depend on the number of worker threads.
pub fn run_study(
    design: &SimulationDesign,
    estimators: &[Box<dyn CovarianceEstimator>],
    cfg: &StudyConfig,
) -> Result<StudyTable> {
    if estimators.is_empty() || cfg.reps == 0 {
        return Err(Error::InvalidArgument("need at least one estimator and one replication".into()));
    }
    let fixed = if cfg.redraw_sigma { None } else { Some(design.covariance(design.seed)?) };
    let fixed_root = match &fixed {
        Some(s) => Some(s.eigen()?.reconstruct_with(|v| 1.0 / v.sqrt())),
        None => None,
    };

    type RepOutcome = Result<Vec<std::result::Result<ReplicationScore, String>>>;
    let outcomes: Vec<RepOutcome> = (0..cfg.reps)
        .into_par_iter()
        .map(|rep| {
            let rep_seed = derive_seed(design.seed, rep as u64);
            let (sigma, root) = match (&fixed, &fixed_root) {
                (Some(s), Some(r)) => (s.clone(), r.clone()),
                _ => {
                    let s = design.covariance(derive_seed(rep_seed, 7))?;
                    let r = s.eigen()?.reconstruct_with(|v| 1.0 / v.sqrt());
                    (s, r)
                }
            };
            let panel = draw_panel(&sigma, design.t, rep_seed, cfg.dist)?;
            let input = EstimationInput { panel: &panel, factors: None, seed: derive_seed(rep_seed, 1) };
            Ok(estimators
                .iter()
                .map(|est| {
                    let start = Instant::now();
                    let out = est.estimate(&input).and_then(|o| o.covariance());
                    let wall_time = start.elapsed().as_secs_f64();
                    out.and_then(|m| score_estimate(&m, &sigma, &root))
                        .map(|(frobenius_loss, spectral_loss, weighted_loss)| ReplicationScore {
                            estimator: est.name(),
                            frobenius_loss,
                            spectral_loss,
                            weighted_loss,
                            wall_time,
                        })
                        .map_err(|e| e.to_string())
                })
                .collect())
        })
        .collect();

    let mut scores = Vec::with_capacity(cfg.reps);
    let mut failures = Vec::new();
    for (rep, outcome) in outcomes.into_iter().enumerate() {
        let row = outcome?;
        let mut cells = Vec::with_capacity(row.len());
        for (e, cell) in row.into_iter().enumerate() {
            match cell {
                Ok(s) => cells.push(Some(s)),
                Err(msg) => {
                    failures.push((rep, estimators[e].name(), msg));
                    cells.push(None);
                }
            }
        }
        scores.push(cells);
    }
    let rows = estimators
        .iter()
        .enumerate()
        .map(|(e, est)| {
            let ok: Vec<&ReplicationScore> = scores.iter().filter_map(|r| r[e].as_ref()).collect();
            summarize(&est.name(), &ok, cfg.reps - ok.len())
        })
        .collect();
    Ok(StudyTable { design: design.clone(), config: cfg.clone(), rows, scores, failures })
}

impl StudyTable {
    /// Aligned text table, one row per estimator.
    pub fn render(&self) -> String {
        let d = &self.design;
        let mut out = format!(
            "design={:?} N={} T={} param={} reps={}\n",
            d.kind,
            d.n,
            d.t,
            d.parameter(),
            self.config.reps
        );
        out.push_str(&format!(
            "{:<10} {:>12} {:>12} {:>10} {:>12} {:>8}\n",
            "estimator", "mean", "median", "stderr", "spectral", "failed"
        ));
        for r in &self.rows {
            out.push_str(&format!(
                "{:<10} {:>12.4} {:>12.4} {:>10.4} {:>12.4} {:>8}\n",
                r.estimator, r.mean, r.median, r.stderr, r.mean_spectral, r.n_failed
            ));
        }
        out
    }

    pub fn row(&self, estimator: &str) -> Option<&StudyRow> {
        self.rows.iter().find(|r| r.estimator == estimator)
    }
}

/// Mean of each entry across the vector, used by callers that aggregate
/// eigenvalue curves.
pub fn mean_curve(curves: &[DVector<f64>]) -> Option<DVector<f64>> {
    let first = curves.first()?;
    let mut acc = DVector::zeros(first.len());
    for c in curves {
        acc += c;
    }
    Some(acc / curves.len() as f64)
}
