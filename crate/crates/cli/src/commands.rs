//! Command-line surface and the work behind each subcommand.

use std::path::PathBuf;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use safcov::estimator::{build_estimators, CovarianceEstimator, EstimationInput, Registered};
use safcov::portfolio::{run_backtest, BacktestConfig, BacktestData, BacktestReport, WeightStats};
use safcov::selection::{scree, select_mu_with, select_num_factors, MuSearchConfig};
use safcov::simulation::{
    derive_seed, draw_raw, gen_factor_strength_design, mean_curve, run_study, Distribution, SimulationDesign,
    StudyConfig,
};
use safcov::{EstimatorId, EstimatorOutput, EstimatorSettings, ReturnPanel, SafConfig, SymMatrix};
use serde::Serialize;
use serde_json::{json, Value};

use crate::error::{CliError, CliResult};
use crate::io::{
    load_factors, load_panel, load_riskfree, monthly_dates, read_table, write_covariance, write_json,
    write_labeled_matrix, write_panel, write_rows,
};
use crate::manifest::{CellError, OutDir, RunManifest, MANIFEST_FILE};

#[derive(Debug, Parser)]
#[command(name = "safcov", version, about = "Sparse approximate factor covariance estimation and GMVP backtests")]
pub struct Cli {
    /// Worker threads; 0 uses every core. Results do not depend on it.
    #[arg(long, global = true, default_value_t = 0)]
    pub jobs: usize,
    /// Output directory.
    #[arg(long, global = true, env = "SAFCOV_OUT_DIR", default_value = "safcov-out")]
    pub out: PathBuf,
    /// JSON file with estimator settings; missing keys keep their defaults.
    #[arg(long, global = true)]
    pub settings: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Monte Carlo loss study on a simulated design.
    Simulate(SimulateArgs),
    /// Covariance estimate of a return panel.
    Estimate(EstimateArgs),
    /// Number of factors and penalty path of a return panel.
    Select(SelectArgs),
    /// Rolling-window GMVP backtest.
    Backtest(BacktestArgs),
    /// Sample-covariance eigenvalues of a panel or a simulated design.
    Scree(ScreeArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Design {
    Uniform,
    Sparse,
    Spiked,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Dist {
    Gaussian,
    T5,
}

impl From<Dist> for Distribution {
    fn from(d: Dist) -> Self {
        match d {
            Dist::Gaussian => Distribution::Gaussian,
            Dist::T5 => Distribution::StudentT5,
        }
    }
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct SimulateArgs {
    #[arg(long, value_enum)]
    pub design: Design,
    #[arg(long = "N", visible_alias = "n")]
    pub n: usize,
    #[arg(long = "T", visible_alias = "t")]
    pub t: usize,
    /// Off-diagonal bound of the uniform and spiked designs.
    #[arg(long, default_value_t = 0.025)]
    pub eta: f64,
    /// Edge probability of the sparse design.
    #[arg(long, default_value_t = 0.1)]
    pub p: f64,
    #[arg(long, default_value_t = 200)]
    pub reps: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "saf,sample,lw,st")]
    pub estimators: String,
    #[arg(long, value_enum, default_value = "gaussian")]
    pub dist: Dist,
    /// Draw a new true covariance in every replication.
    #[arg(long)]
    pub redraw: bool,
    /// Also write the first replication's panel and its true covariance.
    #[arg(long)]
    pub write_panel: bool,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct EstimateArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, default_value = "saf")]
    pub estimator: String,
    /// Choose the number of factors from the eigenvalue gaps.
    #[arg(long, conflicts_with = "r")]
    pub select_r: bool,
    /// Fixed number of factors.
    #[arg(long)]
    pub r: Option<usize>,
    /// Choose the penalty by the information criterion.
    #[arg(long, conflicts_with = "mu")]
    pub select_mu: bool,
    /// Fixed penalty.
    #[arg(long)]
    pub mu: Option<f64>,
    #[arg(long)]
    pub r_max: Option<usize>,
    #[arg(long)]
    pub grid_size: Option<usize>,
    /// Observed factor series, needed by ff3f.
    #[arg(long)]
    pub factors: Option<PathBuf>,
    /// Keep the series as given instead of standardizing them.
    #[arg(long)]
    pub raw: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct SelectArgs {
    #[arg(long)]
    pub input: PathBuf,
    /// Fixed number of factors; only the penalty is searched.
    #[arg(long)]
    pub r: Option<usize>,
    #[arg(long)]
    pub r_max: Option<usize>,
    #[arg(long)]
    pub grid_size: Option<usize>,
    #[arg(long)]
    pub raw: bool,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct BacktestArgs {
    /// Returns, one column per asset; empty cells mark missing values.
    #[arg(long)]
    pub input: PathBuf,
    /// Risk-free rate subtracted from every return.
    #[arg(long)]
    pub riskfree: Option<PathBuf>,
    #[arg(long)]
    pub factors: Option<PathBuf>,
    #[arg(long, default_value_t = 60)]
    pub window: usize,
    #[arg(long, value_delimiter = ',', default_value = "30")]
    pub sizes: Vec<usize>,
    #[arg(long, default_value_t = 10)]
    pub repeats: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "1/n,sample,lw,st,saf")]
    pub estimators: String,
    /// Risk aversion in the certainty equivalent.
    #[arg(long, default_value_t = 1.0)]
    pub gamma: f64,
    /// Periods per year.
    #[arg(long, default_value_t = 12)]
    pub periods: usize,
    /// Shortest prefix of the expanding SD series.
    #[arg(long, default_value_t = 12)]
    pub sd_start: usize,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct ScreeArgs {
    /// Panel whose correlation eigenvalues are listed.
    #[arg(long, conflicts_with_all = ["design", "strength"])]
    pub input: Option<PathBuf>,
    #[arg(long, value_enum, conflicts_with = "strength")]
    pub design: Option<Design>,
    /// Loading strength exponents, e.g. `1,0.8,0.7,0.6`.
    #[arg(long, value_delimiter = ',')]
    pub strength: Option<Vec<f64>>,
    #[arg(long = "N", visible_alias = "n", default_value_t = 200)]
    pub n: usize,
    #[arg(long = "T", visible_alias = "t", default_value_t = 450)]
    pub t: usize,
    #[arg(long, default_value_t = 0.025)]
    pub eta: f64,
    #[arg(long, default_value_t = 0.1)]
    pub p: f64,
    /// Panels averaged into the curve.
    #[arg(long, default_value_t = 1)]
    pub reps: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

/// What a finished command reports on stdout.
#[derive(Debug)]
pub struct Summary {
    pub manifest: PathBuf,
    pub text: String,
}

/// Runs the command on a pool of `--jobs` threads.
pub fn run(cli: &Cli) -> CliResult<Summary> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.jobs)
        .build()
        .map_err(|e| CliError::Usage(format!("cannot start {} workers: {e}", cli.jobs)))?;
    pool.install(|| dispatch(cli))
}

fn dispatch(cli: &Cli) -> CliResult<Summary> {
    let settings = load_settings(cli)?;
    let start = Instant::now();
    let out = OutDir::create(&cli.out)?;
    let (name, seed, args, outcome) = match &cli.command {
        Command::Simulate(a) => ("simulate", Some(a.seed), to_value(a), simulate(a, &settings, out)),
        Command::Estimate(a) => ("estimate", Some(a.seed), to_value(a), estimate(a, settings.clone(), out)),
        Command::Select(a) => ("select", None, to_value(a), select(a, &settings, out)),
        Command::Backtest(a) => ("backtest", Some(a.seed), to_value(a), backtest(a, &settings, out)),
        Command::Scree(a) => ("scree", Some(a.seed), to_value(a), scree_cmd(a, out)),
    };
    let done = outcome?;
    log::info!("{name}: results in {}", done.out.dir().display());
    let manifest = RunManifest {
        command: name.into(),
        version: env!("CARGO_PKG_VERSION").into(),
        seed,
        jobs: rayon::current_num_threads(),
        config: json!({ "args": args, "settings": settings }),
        results: done.results,
        outputs: Vec::new(),
        errors: done.errors,
        wall_time_secs: start.elapsed().as_secs_f64(),
    };
    let manifest = done.out.finish(manifest)?;
    Ok(Summary { manifest, text: done.text })
}

/// Finished work of one command, before the manifest is written.
struct Done {
    out: OutDir,
    results: Value,
    errors: Vec<CellError>,
    text: String,
}

fn to_value<T: Serialize>(v: &T) -> Value {
    serde_json::to_value(v).unwrap_or(Value::Null)
}

fn load_settings(cli: &Cli) -> CliResult<EstimatorSettings> {
    let Some(path) = &cli.settings else {
        return Ok(EstimatorSettings::default());
    };
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::Json { path: path.display().to_string(), source: e })
}

fn parse_ids(list: &str) -> CliResult<Vec<EstimatorId>> {
    let ids = EstimatorId::parse_list(list).map_err(|e| CliError::Usage(e.to_string()))?;
    if ids.is_empty() {
        return Err(CliError::Usage("no estimator given".into()));
    }
    Ok(ids)
}

fn design_of(kind: Design, n: usize, t: usize, eta: f64, p: f64, seed: u64) -> SimulationDesign {
    match kind {
        Design::Uniform => SimulationDesign::uniform(n, t, eta, seed),
        Design::Sparse => SimulationDesign::sparse(n, t, p, seed),
        Design::Spiked => SimulationDesign::spiked(n, t, eta, seed),
    }
}

fn labels(prefix: &str, k: usize) -> Vec<String> {
    (1..=k).map(|i| format!("{prefix}{i}")).collect()
}

#[derive(Serialize)]
struct ReplicationRow<'a> {
    rep: usize,
    estimator: &'a str,
    frobenius_loss: f64,
    spectral_loss: f64,
    weighted_loss: f64,
}

fn simulate(a: &SimulateArgs, settings: &EstimatorSettings, mut out: OutDir) -> CliResult<Done> {
    let ids = parse_ids(&a.estimators)?;
    let design = design_of(a.design, a.n, a.t, a.eta, a.p, a.seed);
    let cfg = StudyConfig { reps: a.reps, dist: a.dist.into(), redraw_sigma: a.redraw };
    let estimators = build_estimators(&ids, settings);
    let table = run_study(&design, &estimators, &cfg)?;

    write_rows(&out.file("study.csv"), &table.rows)?;
    let reps: Vec<ReplicationRow> = table
        .scores
        .iter()
        .enumerate()
        .flat_map(|(rep, row)| {
            row.iter().flatten().map(move |s| ReplicationRow {
                rep,
                estimator: &s.estimator,
                frobenius_loss: s.frobenius_loss,
                spectral_loss: s.spectral_loss,
                weighted_loss: s.weighted_loss,
            })
        })
        .collect();
    write_rows(&out.file("replications.csv"), &reps)?;

    if a.write_panel {
        let rep_seed = derive_seed(a.seed, 0);
        let sigma = if a.redraw { design.covariance(derive_seed(rep_seed, 7))? } else { design.covariance(a.seed)? };
        let raw = draw_raw(&sigma, a.t, rep_seed, a.dist.into())?;
        let panel = ReturnPanel::from_raw_unscaled(raw, labels("x", a.n), monthly_dates(a.t))?;
        write_panel(&out.file("panel.csv"), &panel)?;
        write_covariance(&out.file("sigma.csv"), panel.assets(), &sigma)?;
    }

    let mut wall = serde_json::Map::new();
    for (e, est) in estimators.iter().enumerate() {
        let times: Vec<f64> = table.scores.iter().filter_map(|r| r[e].as_ref().map(|s| s.wall_time)).collect();
        let mean = if times.is_empty() { f64::NAN } else { times.iter().sum::<f64>() / times.len() as f64 };
        wall.insert(est.name(), json!(mean));
    }
    let errors = table
        .failures
        .iter()
        .map(|(rep, est, msg)| CellError { cell: format!("rep {rep} / {est}"), message: msg.clone() })
        .collect();
    Ok(Done {
        results: json!({ "rows": table.rows, "mean_wall_time_secs": wall }),
        errors,
        text: table.render(),
        out,
    })
}

#[derive(Serialize)]
struct WeightRow<'a> {
    asset: &'a str,
    weight: f64,
}

fn estimate(a: &EstimateArgs, mut settings: EstimatorSettings, mut out: OutDir) -> CliResult<Done> {
    let id: EstimatorId = a.estimator.parse().map_err(|e: safcov::Error| CliError::Usage(e.to_string()))?;
    if id == EstimatorId::EqualWeight {
        return Err(CliError::Usage("the 1/n rule has no covariance estimate".into()));
    }
    if let Some(r) = a.r {
        settings.saf.r = Some(r);
    } else if a.select_r {
        settings.saf.r = None;
    }
    if let Some(mu) = a.mu {
        settings.saf.mu = Some(mu);
    } else if a.select_mu {
        settings.saf.mu = None;
    }
    if let Some(r_max) = a.r_max {
        settings.saf.r_max = r_max;
    }
    if let Some(g) = a.grid_size {
        settings.saf.grid_size = g;
    }
    let panel = load_panel(&a.input, !a.raw)?;
    let factors = a.factors.as_deref().map(|p| load_factors(p, panel.dates())).transpose()?;
    let est = Registered::new(id, settings);
    let input = EstimationInput { panel: &panel, factors: factors.as_ref(), seed: a.seed };
    let output = est.estimate(&input)?;
    let weights = output.gmvp_weights()?;
    let (sigma, params, pd): (SymMatrix, Value, bool) = match output {
        EstimatorOutput::Covariance(c) => (c.matrix, to_value(&c.params), c.positive_definite),
        EstimatorOutput::Precision { matrix, zeta } => {
            (matrix.inverse_pd()?, json!({ "zeta": zeta }), true)
        }
        EstimatorOutput::EqualWeight { .. } => unreachable!("rejected above"),
    };

    write_covariance(&out.file("covariance.csv"), panel.assets(), &sigma)?;
    let sidecar = json!({
        "estimator": id.as_str(),
        "assets": panel.n_series(),
        "periods": panel.n_periods(),
        "standardized": !a.raw,
        "positive_definite": pd,
        "params": params,
        "manifest": MANIFEST_FILE,
    });
    write_json(&out.file("covariance.json"), &sidecar)?;
    let rows: Vec<WeightRow> =
        panel.assets().iter().zip(weights.iter()).map(|(asset, w)| WeightRow { asset, weight: *w }).collect();
    write_rows(&out.file("gmvp_weights.csv"), &rows)?;

    let text = format!(
        "{} covariance of {} series over {} periods; params {}\n",
        id.as_str(),
        panel.n_series(),
        panel.n_periods(),
        params
    );
    Ok(Done { results: json!({ "estimator": id.as_str(), "params": params, "positive_definite": pd }), errors: vec![], text, out })
}

#[derive(Serialize)]
struct PathRow {
    mu: f64,
    ic: f64,
    nonzero_loadings: usize,
    failed: bool,
    rank_deficient: bool,
    selected: bool,
}

fn select(a: &SelectArgs, settings: &EstimatorSettings, mut out: OutDir) -> CliResult<Done> {
    let panel = load_panel(&a.input, !a.raw)?;
    let room = panel.n_series().min(panel.n_periods()).saturating_sub(6);
    let r_max = a.r_max.unwrap_or(settings.saf.r_max).min(room);
    let count = if r_max > 0 { Some(select_num_factors(&panel, r_max)?) } else { None };
    let (r, full_rank_only) = match a.r.or(settings.saf.r) {
        Some(r) => (r, true),
        None => match &count {
            Some(c) => (c.r_hat.max(1), c.r_hat > 0),
            None => (1, true),
        },
    };
    let cfg = MuSearchConfig {
        grid_size: a.grid_size.unwrap_or(settings.saf.grid_size),
        full_rank_only,
        base: SafConfig { r, ..settings.saf.base.clone() },
        ..Default::default()
    };
    let sel = select_mu_with(&panel, &cfg)?;

    if let Some(c) = &count {
        write_json(&out.file("factor_count.json"), c)?;
    }
    let path: Vec<PathRow> = (0..sel.grid.len())
        .map(|k| PathRow {
            mu: sel.grid[k],
            ic: sel.ic_values[k],
            nonzero_loadings: sel.kappa_per_mu[k],
            failed: sel.failed[k],
            rank_deficient: sel.rank_deficient[k],
            selected: sel.grid[k] == sel.mu_star,
        })
        .collect();
    write_rows(&out.file("mu_path.csv"), &path)?;
    write_labeled_matrix(&out.file("loadings.csv"), "asset", panel.assets(), &labels("f", r), &sel.fit.loadings)?;

    let r_hat = count.as_ref().map(|c| c.r_hat);
    let results = json!({
        "r_hat": r_hat,
        "xi": count.as_ref().map(|c| c.xi),
        "r": r,
        "mu_star": sel.mu_star,
        "mu_max": sel.mu_max,
        "active_factors": sel.fit.active_factors.len(),
        "nonzero_loadings": sel.fit.nonzero_loadings(),
    });
    let text = format!(
        "r_hat = {}, r = {r}, mu* = {:.6} (mu_max = {:.6}), {} nonzero loadings\n",
        r_hat.map_or("-".into(), |v| v.to_string()),
        sel.mu_star,
        sel.mu_max,
        sel.fit.nonzero_loadings()
    );
    Ok(Done { results, errors: vec![], text, out })
}

#[derive(Serialize)]
struct SummaryRow<'a> {
    estimator: &'a str,
    size: usize,
    sd: f64,
    av: f64,
    ce: f64,
    sr: Option<f64>,
    w_min: Option<f64>,
    w_max: Option<f64>,
    w_sd: Option<f64>,
    w_mad: Option<f64>,
    n_ok: usize,
    n_failed: usize,
}

#[derive(Serialize)]
struct CellRow<'a> {
    estimator: &'a str,
    size: usize,
    repeat: usize,
    sd: Option<f64>,
    av: Option<f64>,
    ce: Option<f64>,
    sr: Option<f64>,
    w_min: Option<f64>,
    w_max: Option<f64>,
    w_sd: Option<f64>,
    w_mad: Option<f64>,
    assets: String,
    error: Option<&'a str>,
}

#[derive(Serialize)]
struct ReturnRow<'a> {
    estimator: &'a str,
    size: usize,
    repeat: usize,
    date: &'a str,
    excess_return: f64,
}

#[derive(Serialize)]
struct ExpandingRow<'a> {
    estimator: &'a str,
    size: usize,
    date: &'a str,
    sd: f64,
}

fn split_stats(w: Option<WeightStats>) -> [Option<f64>; 4] {
    match w {
        Some(w) => [Some(w.min), Some(w.max), Some(w.sd), Some(w.mad)],
        None => [None; 4],
    }
}

fn backtest(a: &BacktestArgs, settings: &EstimatorSettings, mut out: OutDir) -> CliResult<Done> {
    let estimators = parse_ids(&a.estimators)?;
    if a.sizes.is_empty() {
        return Err(CliError::Usage("no subset size given".into()));
    }
    let table = read_table(&a.input)?;
    let rf = a.riskfree.as_deref().map(|p| load_riskfree(p, &table.dates)).transpose()?;
    let factors = a.factors.as_deref().map(|p| load_factors(p, &table.dates)).transpose()?;
    let data = BacktestData::new(table.series(), table.labels, table.dates, rf.as_deref(), factors)?;
    let cfg = BacktestConfig {
        window_h: a.window,
        subset_sizes: a.sizes.clone(),
        n_repeats: a.repeats,
        seed: a.seed,
        estimators,
        annualization_periods: a.periods,
        risk_aversion_gamma: a.gamma,
        settings: settings.clone(),
    };
    let report = run_backtest(&data, &cfg)?;
    write_backtest(&report, &data.assets, a.sd_start, &mut out)?;

    let errors = report
        .cells
        .iter()
        .filter_map(|c| {
            c.error.as_ref().map(|e| CellError {
                cell: format!("{} / size {} / repeat {}", c.estimator, c.size, c.repeat),
                message: e.clone(),
            })
        })
        .collect();
    let mut text = format!("{:<8} {:>6} {:>10} {:>10} {:>10} {:>8}\n", "method", "size", "SD", "AV", "CE", "failed");
    for r in &report.aggregates {
        text.push_str(&format!(
            "{:<8} {:>6} {:>10.4} {:>10.4} {:>10.4} {:>8}\n",
            r.estimator, r.size, r.sd, r.av, r.ce, r.n_failed
        ));
    }
    Ok(Done { results: json!({ "aggregates": report.aggregates }), errors, text, out })
}

fn write_backtest(report: &BacktestReport, assets: &[String], sd_start: usize, out: &mut OutDir) -> CliResult<()> {
    let summary: Vec<SummaryRow> = report
        .aggregates
        .iter()
        .map(|r| {
            let [w_min, w_max, w_sd, w_mad] = split_stats(r.weights);
            SummaryRow {
                estimator: &r.estimator,
                size: r.size,
                sd: r.sd,
                av: r.av,
                ce: r.ce,
                sr: r.sr,
                w_min,
                w_max,
                w_sd,
                w_mad,
                n_ok: r.n_ok,
                n_failed: r.n_failed,
            }
        })
        .collect();
    write_rows(&out.file("summary.csv"), &summary)?;

    let cells: Vec<CellRow> = report
        .cells
        .iter()
        .map(|c| {
            let [w_min, w_max, w_sd, w_mad] = split_stats(c.weight_stats);
            CellRow {
                estimator: &c.estimator,
                size: c.size,
                repeat: c.repeat,
                sd: c.metrics.map(|m| m.sd),
                av: c.metrics.map(|m| m.av),
                ce: c.metrics.map(|m| m.ce),
                sr: c.metrics.and_then(|m| m.sr),
                w_min,
                w_max,
                w_sd,
                w_mad,
                assets: c.assets.iter().map(|&i| assets[i].as_str()).collect::<Vec<_>>().join(" "),
                error: c.error.as_deref(),
            }
        })
        .collect();
    write_rows(&out.file("cells.csv"), &cells)?;

    let returns: Vec<ReturnRow> = report
        .cells
        .iter()
        .flat_map(|c| {
            c.returns.iter().zip(&report.dates).map(move |(r, date)| ReturnRow {
                estimator: &c.estimator,
                size: c.size,
                repeat: c.repeat,
                date,
                excess_return: *r,
            })
        })
        .collect();
    write_rows(&out.file("returns.csv"), &returns)?;

    if sd_start >= 2 && sd_start <= report.dates.len() {
        let series = report.expanding_sd(sd_start)?;
        let rows: Vec<ExpandingRow> = series
            .iter()
            .flat_map(|(est, size, sd)| {
                sd.iter().enumerate().map(move |(k, v)| ExpandingRow {
                    estimator: est,
                    size: *size,
                    date: &report.dates[sd_start + k - 1],
                    sd: *v,
                })
            })
            .collect();
        write_rows(&out.file("expanding_sd.csv"), &rows)?;
    }
    Ok(())
}

#[derive(Serialize)]
struct ScreeRow {
    rank: usize,
    eigenvalue: f64,
}

fn scree_cmd(a: &ScreeArgs, mut out: OutDir) -> CliResult<Done> {
    let curve = if let Some(path) = &a.input {
        let panel = load_panel(path, true)?;
        scree(panel.data())?
    } else {
        let sigma = match (&a.strength, a.design) {
            (Some(exps), None) => gen_factor_strength_design(a.n, exps, a.seed)?.sigma,
            (None, Some(kind)) => design_of(kind, a.n, a.t, a.eta, a.p, a.seed).covariance(a.seed)?,
            _ => return Err(CliError::Usage("give one of --input, --design or --strength".into())),
        };
        if a.reps == 0 {
            return Err(CliError::Usage("--reps must be at least 1".into()));
        }
        let curves = (0..a.reps)
            .map(|rep| scree(&draw_raw(&sigma, a.t, derive_seed(a.seed, rep as u64), Distribution::Gaussian)?))
            .collect::<safcov::Result<Vec<_>>>()?;
        mean_curve(&curves).expect("at least one curve")
    };
    let rows: Vec<ScreeRow> =
        curve.iter().enumerate().map(|(k, v)| ScreeRow { rank: k + 1, eigenvalue: *v }).collect();
    write_rows(&out.file("scree.csv"), &rows)?;
    let ratios: Vec<f64> = curve.iter().zip(curve.iter().skip(1)).take(8).map(|(a, b)| a / b).collect();
    let head: Vec<String> = curve.iter().take(8).map(|v| format!("{v:.4}")).collect();
    let text = format!("leading eigenvalues: {}\n", head.join(" "));
    Ok(Done { results: json!({ "leading": curve.iter().take(8).collect::<Vec<_>>(), "successive_ratios": ratios }), errors: vec![], text, out })
}
