//! Command-line front end.
//!
//! Every command resolves a [`RunConfig`] from an optional `--config` JSON
//! file overlaid with command-line flags, writes it to `<out>/config.json`,
//! and then writes its outputs next to it.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::backtest::{
    load_subperiods, rolling_backtest, strategy_estimate, write_ledger_csv, write_subperiods_csv,
    BacktestConfig, DriftConvention, Strategy,
};
use crate::data::{
    filter_min_history, load_factors, load_panel, load_raw_panel, RawMode, ReturnsPanel,
};
use crate::error::{Error, Result};
use crate::precision::{
    fmb, fmb_observed, nodewise, options_with_rule, sample_inverse, write_precision_csv,
    FactorCount, LambdaRule, PrecisionMethod,
};
use crate::simulate::{
    run_error_curves, write_delta_csv, write_error_curves_csv, ReturnDistribution, SimulationConfig,
};

#[derive(Debug, Parser)]
#[command(
    name = "sparseport",
    version,
    about = "Sparse high-dimensional portfolio estimation"
)]
pub struct Cli {
    /// JSON run configuration; flags given on the command line override it.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads; 0 uses all cores.
    #[arg(long, global = true, default_value_t = 0)]
    pub threads: usize,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Monte Carlo error curves of the MRC weight estimators.
    Simulate(SimulateArgs),
    /// Precision matrix of a returns panel.
    Estimate(EstimateArgs),
    /// Portfolio weights on a full returns panel.
    Weights(WeightsArgs),
    /// Rolling-window out-of-sample backtest.
    Backtest(BacktestArgs),
}

#[derive(Debug, Args)]
pub struct InputArgs {
    /// Returns CSV: a date column followed by one column per asset.
    #[arg(long)]
    pub returns: Option<PathBuf>,
    /// Cells are raw returns; the risk-free column is subtracted.
    #[arg(long)]
    pub raw: bool,
    #[arg(long)]
    pub rf_column: Option<String>,
    /// Keep assets with at least this many observations.
    #[arg(long)]
    pub min_history: Option<usize>,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long)]
    pub case: Option<u8>,
    #[arg(long)]
    pub reps: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    pub t_grid: Option<Vec<usize>>,
    #[arg(long)]
    pub delta: Option<f64>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub rho: Option<f64>,
    /// Multivariate t returns with this many degrees of freedom.
    #[arg(long)]
    pub nu: Option<f64>,
    #[arg(long)]
    pub sigma: Option<f64>,
    #[arg(long)]
    pub threshold: Option<f64>,
    #[arg(long)]
    pub max_fail_fraction: Option<f64>,
}

#[derive(Debug, Args)]
pub struct PrecisionArgs {
    /// mb, fmb or sample_inverse.
    #[arg(long)]
    pub method: Option<String>,
    /// Number of PCA factors, or `auto`.
    #[arg(long)]
    pub k: Option<String>,
    /// Largest factor count considered by `--k auto`.
    #[arg(long)]
    pub k_max: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EstimateArgs {
    #[command(flatten)]
    pub input: InputArgs,
    #[command(flatten)]
    pub precision: PrecisionArgs,
    /// One fixed nodewise penalty instead of per-column GIC.
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Observed factor CSV aligned by date; replaces the PCA factors.
    #[arg(long)]
    pub factors_file: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct WeightsArgs {
    #[command(flatten)]
    pub input: InputArgs,
    #[command(flatten)]
    pub precision: PrecisionArgs,
    #[arg(long)]
    pub formulation: Option<String>,
    #[arg(long)]
    pub mu: Option<f64>,
    #[arg(long)]
    pub sigma: Option<f64>,
    /// Lasso penalty; GIC when omitted.
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub threshold: Option<f64>,
    #[arg(long)]
    pub fallback_size: Option<usize>,
}

#[derive(Debug, Args)]
pub struct BacktestArgs {
    #[command(flatten)]
    pub input: InputArgs,
    #[command(flatten)]
    pub precision: PrecisionArgs,
    #[arg(long)]
    pub strategy: Option<String>,
    #[arg(long)]
    pub train_len: Option<usize>,
    /// Proportional transaction cost as a decimal.
    #[arg(long)]
    pub tc: Option<f64>,
    #[arg(long)]
    pub mu: Option<f64>,
    #[arg(long)]
    pub sigma: Option<f64>,
    #[arg(long, value_delimiter = ',')]
    pub lambda_grid: Option<Vec<f64>>,
    #[arg(long)]
    pub rebalance_every: Option<usize>,
    #[arg(long)]
    pub validation_fraction: Option<f64>,
    /// Expanding instead of rolling training windows.
    #[arg(long)]
    pub expanding: bool,
    #[arg(long)]
    pub threshold: Option<f64>,
    #[arg(long)]
    pub fallback_size: Option<usize>,
    /// pre_cost or fixed_point.
    #[arg(long)]
    pub drift: Option<String>,
    /// `label,start_date,end_date` CSV of reporting sub-periods.
    #[arg(long)]
    pub subperiods: Option<PathBuf>,
    /// Returns column holding the benchmark index; removed from the assets.
    #[arg(long)]
    pub index_column: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CommandName {
    Simulate,
    Estimate,
    Weights,
    Backtest,
}

fn default_rf() -> String {
    "RF".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InputConfig {
    pub returns: PathBuf,
    #[serde(default)]
    pub raw: bool,
    #[serde(default = "default_rf")]
    pub rf_column: String,
    #[serde(default)]
    pub min_history: Option<usize>,
}

fn default_method() -> PrecisionMethod {
    PrecisionMethod::Fmb
}
fn default_factors() -> FactorCount {
    FactorCount::Auto { k_max: 8 }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimateConfig {
    pub input: InputConfig,
    #[serde(default = "default_method")]
    pub method: PrecisionMethod,
    #[serde(default = "default_factors")]
    pub factors: FactorCount,
    #[serde(default)]
    pub lambda: Option<f64>,
    #[serde(default)]
    pub factors_file: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeightsConfig {
    pub input: InputConfig,
    pub formulation: Strategy,
    #[serde(default = "default_method")]
    pub precision: PrecisionMethod,
    #[serde(default = "default_factors")]
    pub factors: FactorCount,
    #[serde(default = "mu_default")]
    pub target_mu: f64,
    #[serde(default = "sigma_default")]
    pub target_sigma: f64,
    #[serde(default)]
    pub lambda: Option<f64>,
    #[serde(default = "threshold_default")]
    pub threshold: f64,
    #[serde(default)]
    pub fallback_size: Option<usize>,
}

fn mu_default() -> f64 {
    0.007974
}
fn sigma_default() -> f64 {
    0.05
}
fn threshold_default() -> f64 {
    1e-4
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BacktestRun {
    pub input: InputConfig,
    pub config: BacktestConfig,
    #[serde(default)]
    pub subperiods: Option<PathBuf>,
    #[serde(default)]
    pub index_column: Option<String>,
}

/// Everything needed to reproduce one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub command: CommandName,
    pub out: PathBuf,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub simulation: Option<SimulationConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub estimate: Option<EstimateConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights: Option<WeightsConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub backtest: Option<BacktestRun>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }
}

/// Process exit code for an error: 1 usage or configuration, 2 data, 3 numerics.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) => 1,
        Error::Rebalance { source, .. } => exit_code(source),
        e if e.is_data_error() => 2,
        _ => 3,
    }
}

fn config_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

fn parse_method(s: &str) -> Result<PrecisionMethod> {
    match s {
        "mb" => Ok(PrecisionMethod::Mb),
        "fmb" => Ok(PrecisionMethod::Fmb),
        "sample_inverse" => Ok(PrecisionMethod::SampleInverse),
        _ => Err(config_err(format!(
            "unknown method '{s}'; valid methods: mb, fmb, sample_inverse"
        ))),
    }
}

fn parse_factors(
    k: Option<&str>,
    k_max: Option<usize>,
    current: FactorCount,
) -> Result<FactorCount> {
    match (k, current) {
        (Some("auto"), _) => Ok(FactorCount::Auto {
            k_max: k_max.unwrap_or(8),
        }),
        (Some(n), _) => n
            .parse()
            .map(FactorCount::Fixed)
            .map_err(|_| config_err(format!("--k must be a count or 'auto', got '{n}'"))),
        (None, FactorCount::Auto { .. }) if k_max.is_some() => Ok(FactorCount::Auto {
            k_max: k_max.unwrap(),
        }),
        (None, c) => Ok(c),
    }
}

fn overlay_input(base: Option<InputConfig>, args: &InputArgs) -> Result<InputConfig> {
    let mut cfg = match (base, &args.returns) {
        (Some(b), _) => b,
        (None, Some(path)) => InputConfig {
            returns: path.clone(),
            raw: false,
            rf_column: default_rf(),
            min_history: None,
        },
        (None, None) => return Err(config_err("--returns is required")),
    };
    if let Some(p) = &args.returns {
        cfg.returns = p.clone();
    }
    cfg.raw |= args.raw;
    if let Some(rf) = &args.rf_column {
        cfg.rf_column = rf.clone();
    }
    if args.min_history.is_some() {
        cfg.min_history = args.min_history;
    }
    Ok(cfg)
}

fn set<T: Clone>(slot: &mut T, v: &Option<T>) {
    if let Some(v) = v {
        *slot = v.clone();
    }
}

/// Merges the optional config file with the command-line flags.
pub fn resolve(cli: &Cli) -> Result<RunConfig> {
    let file = cli.config.as_deref().map(RunConfig::load).transpose()?;
    let name = match cli.command {
        Command::Simulate(_) => CommandName::Simulate,
        Command::Estimate(_) => CommandName::Estimate,
        Command::Weights(_) => CommandName::Weights,
        Command::Backtest(_) => CommandName::Backtest,
    };
    if let Some(f) = &file {
        if f.command != name {
            return Err(config_err(format!(
                "config file is for '{:?}' but the '{:?}' command was given",
                f.command, name
            )));
        }
    }
    let out = cli
        .out
        .clone()
        .or_else(|| file.as_ref().map(|f| f.out.clone()))
        .ok_or_else(|| config_err("--out is required"))?;
    let mut run = RunConfig {
        command: name,
        out,
        seed: cli.seed.or(file.as_ref().and_then(|f| f.seed)),
        simulation: None,
        estimate: None,
        weights: None,
        backtest: None,
    };
    match &cli.command {
        Command::Simulate(a) => {
            let mut sim = match file.and_then(|f| f.simulation) {
                Some(s) => s,
                None => {
                    let seed = run.seed.ok_or_else(|| {
                        config_err("a seed is required (--seed or the config file)")
                    })?;
                    SimulationConfig::new(a.case.unwrap_or(1), seed)
                }
            };
            set(&mut sim.seed, &cli.seed);
            set(&mut sim.case, &a.case);
            set(&mut sim.replications, &a.reps);
            set(&mut sim.t_grid, &a.t_grid);
            set(&mut sim.delta, &a.delta);
            set(&mut sim.k, &a.k);
            set(&mut sim.rho, &a.rho);
            set(&mut sim.sigma, &a.sigma);
            set(&mut sim.threshold, &a.threshold);
            set(&mut sim.max_fail_fraction, &a.max_fail_fraction);
            if let Some(nu) = a.nu {
                sim.distribution = ReturnDistribution::EllipticalT { nu };
            }
            sim.validate()?;
            run.seed = Some(sim.seed);
            run.simulation = Some(sim);
        }
        Command::Estimate(a) => {
            let base = file.and_then(|f| f.estimate);
            let input = overlay_input(base.as_ref().map(|b| b.input.clone()), &a.input)?;
            let mut cfg = base.unwrap_or(EstimateConfig {
                input: input.clone(),
                method: default_method(),
                factors: default_factors(),
                lambda: None,
                factors_file: None,
            });
            cfg.input = input;
            if let Some(m) = &a.precision.method {
                cfg.method = parse_method(m)?;
            }
            cfg.factors = parse_factors(a.precision.k.as_deref(), a.precision.k_max, cfg.factors)?;
            if a.lambda.is_some() {
                cfg.lambda = a.lambda;
            }
            if a.factors_file.is_some() {
                cfg.factors_file = a.factors_file.clone();
            }
            run.estimate = Some(cfg);
        }
        Command::Weights(a) => {
            let base = file.and_then(|f| f.weights);
            let input = overlay_input(base.as_ref().map(|b| b.input.clone()), &a.input)?;
            let formulation = match (&a.formulation, &base) {
                (Some(s), _) => s.parse()?,
                (None, Some(b)) => b.formulation,
                (None, None) => {
                    return Err(config_err(format!(
                        "--formulation is required; valid formulations: {}",
                        Strategy::valid_names()
                    )))
                }
            };
            if formulation == Strategy::Index {
                return Err(config_err("the index strategy has no weights to estimate"));
            }
            let mut cfg = base.unwrap_or(WeightsConfig {
                input: input.clone(),
                formulation,
                precision: default_method(),
                factors: default_factors(),
                target_mu: mu_default(),
                target_sigma: sigma_default(),
                lambda: None,
                threshold: threshold_default(),
                fallback_size: None,
            });
            cfg.input = input;
            cfg.formulation = formulation;
            if let Some(m) = &a.precision.method {
                cfg.precision = parse_method(m)?;
            }
            cfg.factors = parse_factors(a.precision.k.as_deref(), a.precision.k_max, cfg.factors)?;
            set(&mut cfg.target_mu, &a.mu);
            set(&mut cfg.target_sigma, &a.sigma);
            set(&mut cfg.threshold, &a.threshold);
            if a.lambda.is_some() {
                cfg.lambda = a.lambda;
            }
            if a.fallback_size.is_some() {
                cfg.fallback_size = a.fallback_size;
            }
            run.weights = Some(cfg);
        }
        Command::Backtest(a) => {
            let base = file.and_then(|f| f.backtest);
            let input = overlay_input(base.as_ref().map(|b| b.input.clone()), &a.input)?;
            let strategy = match (&a.strategy, &base) {
                (Some(s), _) => s.parse()?,
                (None, Some(b)) => b.config.strategy,
                (None, None) => {
                    return Err(config_err(format!(
                        "--strategy is required; valid strategies: {}",
                        Strategy::valid_names()
                    )))
                }
            };
            let train_len = a
                .train_len
                .or(base.as_ref().map(|b| b.config.train_len))
                .ok_or_else(|| config_err("--train-len is required"))?;
            let mut run_cfg = base.unwrap_or(BacktestRun {
                input: input.clone(),
                config: BacktestConfig::new(strategy, train_len),
                subperiods: None,
                index_column: None,
            });
            run_cfg.input = input;
            let c = &mut run_cfg.config;
            c.strategy = strategy;
            c.train_len = train_len;
            set(&mut c.transaction_cost, &a.tc);
            set(&mut c.target_mu, &a.mu);
            set(&mut c.target_sigma, &a.sigma);
            set(&mut c.lambda_grid, &a.lambda_grid);
            set(&mut c.rebalance_every, &a.rebalance_every);
            set(&mut c.validation_fraction, &a.validation_fraction);
            set(&mut c.threshold, &a.threshold);
            c.expanding |= a.expanding;
            if a.fallback_size.is_some() {
                c.fallback_size = a.fallback_size;
            }
            if let Some(m) = &a.precision.method {
                c.precision = parse_method(m)?;
            }
            c.factors = parse_factors(a.precision.k.as_deref(), a.precision.k_max, c.factors)?;
            if let Some(d) = &a.drift {
                c.drift = match d.as_str() {
                    "pre_cost" => DriftConvention::PreCost,
                    "fixed_point" => DriftConvention::FixedPoint,
                    _ => {
                        return Err(config_err(format!(
                            "unknown drift '{d}'; valid: pre_cost, fixed_point"
                        )))
                    }
                };
            }
            c.validate()?;
            if a.subperiods.is_some() {
                run_cfg.subperiods = a.subperiods.clone();
            }
            if a.index_column.is_some() {
                run_cfg.index_column = a.index_column.clone();
            }
            run.backtest = Some(run_cfg);
        }
    }
    Ok(run)
}

fn load_input(cfg: &InputConfig) -> Result<ReturnsPanel<f64>> {
    let mode = if cfg.raw {
        RawMode::Raw {
            rf_column: cfg.rf_column.clone(),
        }
    } else {
        RawMode::Excess
    };
    match cfg.min_history {
        Some(min) => {
            filter_min_history(&load_raw_panel::<f64>(&cfg.returns, &mode)?, min)?.complete()
        }
        None => load_panel(&cfg.returns, &mode),
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Error::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    write_text(path, &(serde_json::to_string_pretty(value)? + "\n"))
}

/// Writes the resolved config and runs the command.
pub fn execute(run: &RunConfig) -> Result<()> {
    fs::create_dir_all(&run.out).map_err(|e| Error::io(&run.out, e))?;
    write_text(&run.out.join("config.json"), &run.to_json()?)?;
    let missing = || config_err("config has no section for its command");
    match run.command {
        CommandName::Simulate => {
            cmd_simulate(run.simulation.as_ref().ok_or_else(missing)?, &run.out)
        }
        CommandName::Estimate => cmd_estimate(run.estimate.as_ref().ok_or_else(missing)?, &run.out),
        CommandName::Weights => cmd_weights(run.weights.as_ref().ok_or_else(missing)?, &run.out),
        CommandName::Backtest => cmd_backtest(run.backtest.as_ref().ok_or_else(missing)?, &run.out),
    }
}

pub fn cmd_simulate(cfg: &SimulationConfig, out: &Path) -> Result<()> {
    let curves = run_error_curves(cfg)?;
    for f in &curves.failures {
        log::warn!("T={} replication {} {}: {}", f.0, f.1, f.2, f.3);
    }
    write_error_curves_csv(&curves.rows, create(&out.join("error_curves.csv"))?)?;
    write_delta_csv(&curves.delta, create(&out.join("delta.csv"))?)?;
    Ok(())
}

#[derive(Debug, Serialize)]
struct PrecisionMeta {
    method: PrecisionMethod,
    lambda_rule: String,
    k: Option<usize>,
    n_assets: usize,
    n_periods: usize,
    warnings: Vec<String>,
}

pub fn cmd_estimate(cfg: &EstimateConfig, out: &Path) -> Result<()> {
    let panel = load_input(&cfg.input)?;
    let rule = cfg.lambda.map_or(LambdaRule::Gic, LambdaRule::Fixed);
    let opts = options_with_rule(rule);
    let est = match (cfg.method, &cfg.factors_file) {
        (PrecisionMethod::Fmb, Some(path)) => {
            let f = load_factors::<f64>(path, &panel.dates, &[cfg.input.rf_column.as_str()])?;
            fmb_observed(&panel.returns, &f.values, &opts)?
        }
        (_, Some(_)) => return Err(config_err("--factors-file needs --method fmb")),
        (PrecisionMethod::Fmb, None) => fmb(&panel.returns, &cfg.factors, &opts)?,
        (PrecisionMethod::Mb, None) => nodewise(&panel.returns, &opts)?,
        (PrecisionMethod::SampleInverse, None) => sample_inverse(&panel.returns)?,
    };
    for w in &est.warnings {
        log::warn!("{w}");
    }
    write_precision_csv(
        &est,
        &rule.label(),
        &panel.asset_ids,
        create(&out.join("precision.csv"))?,
    )?;
    write_json(
        &out.join("precision_meta.json"),
        &PrecisionMeta {
            method: est.method,
            lambda_rule: rule.label(),
            k: est.k,
            n_assets: panel.n_assets(),
            n_periods: panel.n_periods(),
            warnings: est.warnings.clone(),
        },
    )
}

#[derive(Debug, Serialize)]
struct WeightsDiagnostics {
    formulation: Strategy,
    estimation_end: String,
    n_assets: usize,
    n_periods: usize,
    sum: f64,
    lambda: Option<f64>,
    support: Option<Vec<String>>,
    target_mu: f64,
    target_sigma: f64,
    debiased: Option<DebiasSummary>,
}

#[derive(Debug, Serialize)]
struct DebiasSummary {
    sigma_e_sq_hat: f64,
    delta_inf: f64,
    standard_errors: Vec<f64>,
}

pub fn cmd_weights(cfg: &WeightsConfig, out: &Path) -> Result<()> {
    let panel = load_input(&cfg.input)?;
    let mut bt = BacktestConfig::new(cfg.formulation, panel.n_periods().max(2));
    bt.precision = cfg.precision;
    bt.factors = cfg.factors;
    bt.target_mu = cfg.target_mu;
    bt.target_sigma = cfg.target_sigma;
    bt.threshold = cfg.threshold;
    bt.fallback_size = cfg.fallback_size;
    bt.validate()?;
    let est = strategy_estimate(&panel.returns, cfg.lambda, &bt)?;
    let date = panel.dates.last().cloned().unwrap_or_default();
    let mut w = csv::Writer::from_writer(create(&out.join("weights.csv"))?);
    w.write_record(["date", "asset_id", "weight", "formulation"])?;
    for (id, v) in panel.asset_ids.iter().zip(est.weights.iter()) {
        w.write_record([date.as_str(), id, &v.to_string(), cfg.formulation.name()])?;
    }
    w.flush()
        .map_err(|e| Error::io(out.join("weights.csv"), e))?;
    let diagnostics = WeightsDiagnostics {
        formulation: cfg.formulation,
        estimation_end: date,
        n_assets: panel.n_assets(),
        n_periods: panel.n_periods(),
        sum: est.weights.sum(),
        lambda: est.lambda,
        support: est
            .support
            .as_ref()
            .map(|s| s.iter().map(|&i| panel.asset_ids[i].clone()).collect()),
        target_mu: cfg.target_mu,
        target_sigma: cfg.target_sigma,
        debiased: est.debias.as_ref().map(|d| DebiasSummary {
            sigma_e_sq_hat: d.sigma_e_sq_hat,
            delta_inf: d.delta_inf,
            standard_errors: d.standard_errors.iter().copied().collect(),
        }),
    };
    write_json(&out.join("diagnostics.json"), &diagnostics)
}

/// Removes the named column from the panel and returns it as a series.
fn split_index(
    panel: ReturnsPanel<f64>,
    column: &str,
) -> Result<(ReturnsPanel<f64>, DVector<f64>)> {
    let pos = panel
        .asset_ids
        .iter()
        .position(|a| a == column)
        .ok_or_else(|| {
            Error::Validation(format!(
                "index column '{column}' not found in the returns file"
            ))
        })?;
    let series = panel.returns.row(pos).transpose();
    let keep: Vec<usize> = (0..panel.n_assets()).filter(|&i| i != pos).collect();
    if keep.is_empty() {
        return Err(Error::EmptyPanel("only the index column is present".into()));
    }
    let returns = DMatrix::from_fn(keep.len(), panel.n_periods(), |i, t| {
        panel.returns[(keep[i], t)]
    });
    let ids = keep.iter().map(|&i| panel.asset_ids[i].clone()).collect();
    Ok((
        ReturnsPanel::new(returns, ids, panel.dates, panel.risk_free)?,
        series,
    ))
}

pub fn cmd_backtest(run: &BacktestRun, out: &Path) -> Result<()> {
    let mut panel = load_input(&run.input)?;
    let mut index = None;
    if let Some(col) = &run.index_column {
        let (p, s) = split_index(panel, col)?;
        panel = p;
        index = Some(s);
    }
    let subperiods = match &run.subperiods {
        Some(path) => load_subperiods(path)?,
        None => Vec::new(),
    };
    let report = rolling_backtest(&panel, &run.config, index.as_ref(), &subperiods)?;
    write_json(&out.join("report.json"), &report)?;
    write_ledger_csv(&report, create(&out.join("ledger.csv"))?)?;
    if !report.subperiods.is_empty() {
        write_subperiods_csv(&report.subperiods, create(&out.join("subperiods.csv"))?)?;
    }
    let mut w = csv::Writer::from_writer(create(&out.join("weights.csv"))?);
    w.write_record(["date", "asset_id", "weight", "formulation"])?;
    for rb in &report.rebalances {
        for (id, v) in report.asset_ids.iter().zip(&rb.weights) {
            w.write_record([rb.date.as_str(), id, &v.to_string(), report.strategy.name()])?;
        }
    }
    w.flush()
        .map_err(|e| Error::io(out.join("weights.csv"), e))?;
    Ok(())
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn run<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    if cli.threads > 0 {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(cli.threads)
            .build_global()
        {
            log::warn!("thread pool already initialised: {e}");
        }
    }
    let result = resolve(&cli).and_then(|run| execute(&run));
    match result {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(std::io::stderr(), "error: {e}");
            exit_code(&e)
        }
    }
}
