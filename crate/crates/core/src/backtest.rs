//! Rolling-window out-of-sample evaluation with proportional transaction costs.
//!
//! Weights chosen before period `t` earn `w_t' r_{t+1}`. After the period the
//! holdings drift to `w+_t`; moving to the next target costs
//! `c (1 + w_t' r_{t+1}) sum_j |w_{t+1,j} - w+_{t,j}|`.

use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{date_before, make_windows, ReturnsPanel};
use crate::error::{Error, Result};
use crate::linalg::row_means;
use crate::precision::{
    fmb, nodewise, sample_inverse, FactorCount, NodewiseOptions, PrecisionMethod,
};
use crate::scalar::Scalar;
use crate::solver::LassoOptions;
use crate::weights::{
    debias, gmv, mrc, mrc_lasso, mrc_lasso_gic, mwc, post_lasso_from_weights,
    second_moment_precision, sharpe_state, DebiasDiagnostics, InnerFormulation, PostLassoConfig,
    Target, WeightVector,
};

const FIXED_POINT_MAX_ITER: usize = 100;

/// Sample mean, sample standard deviation (`n - 1`) and their ratio.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Performance<T> {
    pub mean: T,
    pub sd: T,
    pub sharpe: T,
}

pub fn summarize<T: Scalar>(returns: &[T]) -> Result<Performance<T>> {
    let n = returns.len();
    if n < 2 {
        return Err(Error::Validation(format!(
            "performance needs at least 2 periods, got {n}"
        )));
    }
    let mean = returns.iter().fold(T::zero(), |a, &r| a + r) / T::from_count(n);
    let ss = returns
        .iter()
        .fold(T::zero(), |a, &r| a + (r - mean) * (r - mean));
    let sd = (ss / T::from_count(n - 1)).sqrt();
    if !(sd > T::zero()) {
        return Err(Error::UndefinedSharpe);
    }
    Ok(Performance {
        mean,
        sd,
        sharpe: mean / sd,
    })
}

fn check_path<T: Scalar>(weights: &[DVector<T>], returns: &[DVector<T>]) -> Result<()> {
    let n = returns.len();
    if weights.len() != n && weights.len() != n + 1 {
        return Err(Error::DimensionMismatch(format!(
            "{} weight vectors for {n} return periods (need {n} or {})",
            weights.len(),
            n + 1
        )));
    }
    if let Some(p) = returns.first().map(|r| r.len()) {
        if let Some(bad) = weights.iter().chain(returns).find(|v| v.len() != p) {
            return Err(Error::DimensionMismatch(format!(
                "vector of length {} in a {p}-asset path",
                bad.len()
            )));
        }
    }
    Ok(())
}

/// `w_t' r_{t+1}` for every period.
pub fn portfolio_returns<T: Scalar>(
    weights: &[DVector<T>],
    returns: &[DVector<T>],
) -> Result<Vec<T>> {
    check_path(weights, returns)?;
    Ok(returns.iter().zip(weights).map(|(r, w)| w.dot(r)).collect())
}

pub fn perf_no_tc<T: Scalar>(
    weights: &[DVector<T>],
    returns: &[DVector<T>],
) -> Result<Performance<T>> {
    summarize(&portfolio_returns(weights, returns)?)
}

/// Which portfolio return scales the drifted holdings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DriftConvention {
    /// The gross return `w_t' r_{t+1}`; costs are computed once.
    #[default]
    PreCost,
    /// The net return, solved by fixed-point iteration.
    FixedPoint,
}

/// Holdings after one period: `w_j (1 + r_j + rf) / (1 + port + rf)`.
pub fn drift<T: Scalar>(
    w: &DVector<T>,
    r: &DVector<T>,
    rf: T,
    port: T,
    period: usize,
) -> Result<DVector<T>> {
    let denom = T::one() + port + rf;
    if !(denom > T::zero()) {
        return Err(Error::PathologicalReturn {
            period,
            value: denom.as_f64(),
        });
    }
    let mut out = w.clone();
    for (o, &rj) in out.iter_mut().zip(r.iter()) {
        let grow = T::one() + rj + rf;
        if !(grow > T::zero()) {
            return Err(Error::PathologicalReturn {
                period,
                value: grow.as_f64(),
            });
        }
        *o = *o * grow / denom;
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CostedPath<T> {
    pub gross: Vec<T>,
    pub net: Vec<T>,
    /// `sum_j |w_{t+1,j} - w+_{t,j}|`, zero after the last period when no
    /// further weights are given.
    pub turnover: Vec<T>,
    pub performance: Performance<T>,
    /// Mean of `turnover` over all periods.
    pub mean_turnover: T,
}

/// Net-of-cost returns and turnover. `weights` holds one vector per period,
/// optionally followed by the portfolio chosen after the last period.
pub fn perf_with_tc<T: Scalar>(
    weights: &[DVector<T>],
    returns: &[DVector<T>],
    risk_free: &[T],
    c: T,
    convention: DriftConvention,
) -> Result<CostedPath<T>> {
    check_path(weights, returns)?;
    let n = returns.len();
    if risk_free.len() != n {
        return Err(Error::DimensionMismatch(format!(
            "{} risk-free rates for {n} periods",
            risk_free.len()
        )));
    }
    if !(c >= T::zero()) {
        return Err(Error::Config(format!(
            "transaction cost must be >= 0, got {c}"
        )));
    }
    let mut gross = Vec::with_capacity(n);
    let mut net = Vec::with_capacity(n);
    let mut turnover = Vec::with_capacity(n);
    for t in 0..n {
        let (w, r, rf) = (&weights[t], &returns[t], risk_free[t]);
        let g = w.dot(r);
        let trade = |port: T| -> Result<T> {
            match weights.get(t + 1) {
                Some(next) => {
                    let plus = drift(w, r, rf, port, t)?;
                    Ok((next - plus).abs().sum())
                }
                None => {
                    drift(w, r, rf, port, t)?;
                    Ok(T::zero())
                }
            }
        };
        let cost = |tv: T| c * (T::one() + g) * tv;
        let mut tv = trade(g)?;
        let mut r_net = g - cost(tv);
        if convention == DriftConvention::FixedPoint && c > T::zero() {
            let tol = T::machine_eps() * T::lit(4.0);
            for _ in 0..FIXED_POINT_MAX_ITER {
                let tv_next = trade(r_net)?;
                let next = g - cost(tv_next);
                let done = (next - r_net).abs() <= tol * (T::one() + r_net.abs());
                tv = tv_next;
                r_net = next;
                if done {
                    break;
                }
            }
        }
        gross.push(g);
        net.push(r_net);
        turnover.push(tv);
    }
    let performance = summarize(&net)?;
    let mean_turnover = turnover.iter().fold(T::zero(), |a, &v| a + v) / T::from_count(n);
    Ok(CostedPath {
        gross,
        net,
        turnover,
        performance,
        mean_turnover,
    })
}

/// Cumulative excess return, compounded.
pub fn cer<T: Scalar>(returns: &[T]) -> T {
    returns.iter().fold(T::one(), |a, &r| a * (T::one() + r)) - T::one()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    /// `1/p` in every asset at every rebalance.
    Ew,
    /// An external index return series held with weight one.
    Index,
    Gmv,
    Mwc,
    Mrc,
    MrcLasso,
    MrcDebiased,
    PostLassoGmv,
    PostLassoMwc,
    PostLassoMrc,
}

impl Strategy {
    pub const ALL: [Strategy; 10] = [
        Strategy::Ew,
        Strategy::Index,
        Strategy::Gmv,
        Strategy::Mwc,
        Strategy::Mrc,
        Strategy::MrcLasso,
        Strategy::MrcDebiased,
        Strategy::PostLassoGmv,
        Strategy::PostLassoMwc,
        Strategy::PostLassoMrc,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Ew => "ew",
            Strategy::Index => "index",
            Strategy::Gmv => "gmv",
            Strategy::Mwc => "mwc",
            Strategy::Mrc => "mrc",
            Strategy::MrcLasso => "mrc_lasso",
            Strategy::MrcDebiased => "mrc_debiased",
            Strategy::PostLassoGmv => "post_lasso_gmv",
            Strategy::PostLassoMwc => "post_lasso_mwc",
            Strategy::PostLassoMrc => "post_lasso_mrc",
        }
    }

    pub fn valid_names() -> String {
        Self::ALL
            .iter()
            .map(|s| s.name())
            .collect::<Vec<_>>()
            .join(", ")
    }

    /// Strategies with a Lasso step, and so a tunable penalty.
    pub fn is_sparse(self) -> bool {
        matches!(
            self,
            Strategy::MrcLasso
                | Strategy::MrcDebiased
                | Strategy::PostLassoGmv
                | Strategy::PostLassoMwc
                | Strategy::PostLassoMrc
        )
    }

    fn post_inner(self) -> Option<InnerFormulation> {
        match self {
            Strategy::PostLassoGmv => Some(InnerFormulation::Gmv),
            Strategy::PostLassoMwc => Some(InnerFormulation::Mwc),
            Strategy::PostLassoMrc => Some(InnerFormulation::Mrc),
            _ => None,
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .iter()
            .copied()
            .find(|v| v.name() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown strategy '{s}'; valid strategies: {}",
                    Self::valid_names()
                ))
            })
    }
}

fn default_tc() -> f64 {
    0.005
}
fn default_mu() -> f64 {
    0.007974
}
fn default_sigma() -> f64 {
    0.05
}
fn default_one() -> usize {
    1
}
fn default_validation() -> f64 {
    1.0 / 3.0
}
fn default_precision() -> PrecisionMethod {
    PrecisionMethod::Fmb
}
fn default_factors() -> FactorCount {
    FactorCount::Auto { k_max: 8 }
}
fn default_threshold() -> f64 {
    1e-4
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BacktestConfig {
    pub strategy: Strategy,
    pub train_len: usize,
    /// Proportional cost `c` as a decimal (0.005 is 50 basis points).
    #[serde(default = "default_tc", alias = "tc_bps")]
    pub transaction_cost: f64,
    #[serde(default = "default_mu")]
    pub target_mu: f64,
    #[serde(default = "default_sigma")]
    pub target_sigma: f64,
    /// Candidate penalties for sparse strategies. Empty selects each penalty
    /// by GIC on the training window instead of validation Sharpe.
    #[serde(default)]
    pub lambda_grid: Vec<f64>,
    #[serde(default = "default_one")]
    pub rebalance_every: usize,
    /// Trailing share of the training window used to score penalties.
    #[serde(default = "default_validation")]
    pub validation_fraction: f64,
    #[serde(default)]
    pub expanding: bool,
    #[serde(default = "default_precision")]
    pub precision: PrecisionMethod,
    #[serde(default = "default_factors")]
    pub factors: FactorCount,
    /// Post-Lasso selection threshold.
    #[serde(default = "default_threshold")]
    pub threshold: f64,
    #[serde(default)]
    pub fallback_size: Option<usize>,
    #[serde(default)]
    pub drift: DriftConvention,
}

impl BacktestConfig {
    pub fn new(strategy: Strategy, train_len: usize) -> Self {
        Self {
            strategy,
            train_len,
            transaction_cost: default_tc(),
            target_mu: default_mu(),
            target_sigma: default_sigma(),
            lambda_grid: Vec::new(),
            rebalance_every: 1,
            validation_fraction: default_validation(),
            expanding: false,
            precision: default_precision(),
            factors: default_factors(),
            threshold: default_threshold(),
            fallback_size: None,
            drift: DriftConvention::PreCost,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.train_len < 2 {
            return bad(format!("train_len must be >= 2, got {}", self.train_len));
        }
        if !(self.transaction_cost >= 0.0 && self.transaction_cost.is_finite()) {
            return bad(format!(
                "transaction cost must be >= 0, got {}",
                self.transaction_cost
            ));
        }
        if !(self.target_sigma > 0.0 && self.target_sigma.is_finite()) {
            return bad(format!(
                "target_sigma must be > 0, got {}",
                self.target_sigma
            ));
        }
        if !self.target_mu.is_finite() {
            return bad("target_mu must be finite".into());
        }
        if self.rebalance_every == 0 {
            return bad("rebalance_every must be >= 1".into());
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return bad(format!(
                "validation_fraction must lie in (0, 1), got {}",
                self.validation_fraction
            ));
        }
        if let Some(l) = self
            .lambda_grid
            .iter()
            .find(|l| !(**l > 0.0 && l.is_finite()))
        {
            return bad(format!("lambda grid values must be positive, got {l}"));
        }
        if !(self.threshold >= 0.0) {
            return bad(format!("threshold must be >= 0, got {}", self.threshold));
        }
        Ok(())
    }
}

/// Inputs shared by every penalty on one estimation window.
struct SparseState<T> {
    theta: DMatrix<T>,
    m: DVector<T>,
    y_hat: T,
}

fn estimate_precision<T: Scalar>(window: &DMatrix<T>, cfg: &BacktestConfig) -> Result<DMatrix<T>> {
    let opts = NodewiseOptions::default();
    let est = match cfg.precision {
        PrecisionMethod::Fmb => fmb(window, &cfg.factors, &opts)?,
        PrecisionMethod::Mb => nodewise(window, &opts)?,
        PrecisionMethod::SampleInverse => sample_inverse(window)?,
    };
    Ok(est.theta)
}

fn sparse_state<T: Scalar>(window: &DMatrix<T>, cfg: &BacktestConfig) -> Result<SparseState<T>> {
    let theta = estimate_precision(window, cfg)?;
    let m = row_means(window);
    let state = sharpe_state(&theta, &m, Target::Sigma(T::lit(cfg.target_sigma)))?;
    Ok(SparseState {
        theta,
        m,
        y_hat: state.y_hat,
    })
}

fn sparse_weights<T: Scalar>(
    window: &DMatrix<T>,
    state: &SparseState<T>,
    lambda: Option<T>,
    cfg: &BacktestConfig,
) -> Result<StrategyEstimate<T>> {
    let opts = LassoOptions::default();
    let lasso = match lambda {
        Some(l) => mrc_lasso(window, state.y_hat, l, &opts)?,
        None => mrc_lasso_gic(window, state.y_hat, &opts)?,
    };
    if cfg.strategy == Strategy::MrcDebiased {
        let theta2 = second_moment_precision(&state.theta, &state.m)?;
        let (w, diag) = debias(&lasso, &theta2, window, state.y_hat)?;
        return Ok(StrategyEstimate::from_vector(w, Some(diag)));
    }
    if let Some(inner) = cfg.strategy.post_inner() {
        let post = PostLassoConfig {
            threshold: T::lit(cfg.threshold),
            inner,
            mu: Some(T::lit(cfg.target_mu)),
            sigma: Some(T::lit(cfg.target_sigma)),
            fallback_size: cfg.fallback_size,
            factors: cfg.factors,
            nodewise: NodewiseOptions::default(),
        };
        let mut out = post_lasso_from_weights(window, &lasso.weights, &post)?;
        out.lambda = lasso.lambda;
        return Ok(StrategyEstimate::from_vector(out, None));
    }
    Ok(StrategyEstimate::from_vector(lasso, None))
}

/// Weights of one strategy on one window, with what produced them.
#[derive(Debug, Clone)]
pub struct StrategyEstimate<T> {
    pub weights: DVector<T>,
    /// Lasso penalty, for sparse strategies.
    pub lambda: Option<T>,
    /// Selected assets for Lasso and post-Lasso weights.
    pub support: Option<Vec<usize>>,
    pub debias: Option<DebiasDiagnostics<T>>,
}

impl<T: Scalar> StrategyEstimate<T> {
    fn from_vector(w: WeightVector<T>, debias: Option<DebiasDiagnostics<T>>) -> Self {
        let sparse = w.lambda.is_some() && debias.is_none();
        Self {
            support: sparse.then(|| w.support.clone()),
            lambda: w.lambda,
            weights: w.weights,
            debias,
        }
    }

    fn dense(weights: DVector<T>) -> Self {
        Self {
            weights,
            lambda: None,
            support: None,
            debias: None,
        }
    }
}

/// Target weights estimated on `window` (assets x periods).
pub fn strategy_estimate<T: Scalar>(
    window: &DMatrix<T>,
    lambda: Option<T>,
    cfg: &BacktestConfig,
) -> Result<StrategyEstimate<T>> {
    let p = window.nrows();
    let dense = StrategyEstimate::dense;
    match cfg.strategy {
        Strategy::Ew | Strategy::Index => {
            Ok(dense(DVector::from_element(p, T::one() / T::from_count(p))))
        }
        Strategy::Gmv => Ok(dense(gmv(&estimate_precision(window, cfg)?)?.weights)),
        Strategy::Mwc => {
            let theta = estimate_precision(window, cfg)?;
            Ok(dense(
                mwc(&theta, &row_means(window), T::lit(cfg.target_mu))?.weights,
            ))
        }
        Strategy::Mrc => {
            let theta = estimate_precision(window, cfg)?;
            Ok(dense(
                mrc(&theta, &row_means(window), T::lit(cfg.target_sigma))?.weights,
            ))
        }
        _ => {
            let state = sparse_state(window, cfg)?;
            sparse_weights(window, &state, lambda, cfg)
        }
    }
}

pub fn strategy_weights<T: Scalar>(
    window: &DMatrix<T>,
    lambda: Option<T>,
    cfg: &BacktestConfig,
) -> Result<DVector<T>> {
    strategy_estimate(window, lambda, cfg).map(|e| e.weights)
}

/// Penalty with the highest validation Sharpe ratio when weights estimated on
/// `train` are held through `validation`. Ties go to the larger penalty;
/// penalties whose weights fail or give an undefined Sharpe are skipped.
pub fn tune_lambda_sharpe<T: Scalar>(
    train: &DMatrix<T>,
    validation: &DMatrix<T>,
    grid: &[T],
    cfg: &BacktestConfig,
) -> Result<T> {
    if grid.is_empty() {
        return Err(Error::Config("lambda grid is empty".into()));
    }
    let state = sparse_state(train, cfg)
        .map_err(|e| Error::Tuning(vec![format!("precision stage: {e}")]))?;
    let mut order: Vec<T> = grid.to_vec();
    order.sort_by(|a, b| b.partial_cmp(a).unwrap_or(std::cmp::Ordering::Equal));
    let scores: Vec<Result<T>> = order
        .par_iter()
        .map(|&l| {
            let w = sparse_weights(train, &state, Some(l), cfg)?;
            let r: Vec<T> = validation
                .column_iter()
                .map(|c| w.weights.dot(&c))
                .collect();
            Ok(summarize(&r)?.sharpe)
        })
        .collect();
    let mut best: Option<(T, T)> = None;
    let mut failures = Vec::new();
    for (&l, s) in order.iter().zip(scores) {
        match s {
            Ok(sr) if sr.finite() => {
                if best.is_none_or(|(_, b)| sr > b) {
                    best = Some((l, sr));
                }
            }
            Ok(sr) => failures.push(format!("lambda {l}: Sharpe {sr}")),
            Err(e) => failures.push(format!("lambda {l}: {e}")),
        }
    }
    best.map(|(l, _)| l).ok_or(Error::Tuning(failures))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PeriodRecord {
    /// Date of the realized return.
    pub date: String,
    pub gross: f64,
    pub net: f64,
    /// Trade made after this period to reach the next portfolio.
    pub turnover: f64,
    pub rebalanced: bool,
    pub lambda: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RebalanceRecord {
    /// First date the weights are held for.
    pub date: String,
    pub lambda: Option<f64>,
    pub weights: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregates {
    pub mean: f64,
    pub sd: f64,
    pub sharpe: f64,
    pub mean_tc: f64,
    pub sd_tc: f64,
    pub sharpe_tc: f64,
    pub turnover: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubPeriod {
    pub label: String,
    pub start_date: String,
    pub end_date: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubPeriodResult {
    pub label: String,
    pub start_date: String,
    pub end_date: String,
    pub n_periods: usize,
    pub cer: f64,
    /// Sample s.d. of net returns; absent with fewer than two periods.
    pub risk: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BacktestReport {
    pub strategy: Strategy,
    pub asset_ids: Vec<String>,
    pub per_period: Vec<PeriodRecord>,
    pub rebalances: Vec<RebalanceRecord>,
    pub aggregates: Aggregates,
    pub subperiods: Vec<SubPeriodResult>,
}

fn in_range(date: &str, start: &str, end: &str) -> bool {
    !date_before(date, start) && !date_before(end, date)
}

/// CER and risk of net returns over each user-supplied date range (inclusive).
pub fn subperiod_table(
    per_period: &[PeriodRecord],
    periods: &[SubPeriod],
) -> Result<Vec<SubPeriodResult>> {
    periods
        .iter()
        .map(|sp| {
            let net: Vec<f64> = per_period
                .iter()
                .filter(|r| in_range(&r.date, &sp.start_date, &sp.end_date))
                .map(|r| r.net)
                .collect();
            if net.is_empty() {
                return Err(Error::Config(format!(
                    "sub-period '{}' ({} to {}) contains no test periods",
                    sp.label, sp.start_date, sp.end_date
                )));
            }
            Ok(SubPeriodResult {
                label: sp.label.clone(),
                start_date: sp.start_date.clone(),
                end_date: sp.end_date.clone(),
                n_periods: net.len(),
                cer: cer(&net),
                risk: summarize(&net).map(|p| p.sd).ok(),
            })
        })
        .collect()
}

/// Walks the test sample: at each rebalance date the penalty is tuned and the
/// weights estimated from the training window strictly before that date.
/// Between rebalances the drifted holdings are kept. `index` supplies the
/// return series for [`Strategy::Index`].
pub fn rolling_backtest<T: Scalar>(
    panel: &ReturnsPanel<T>,
    cfg: &BacktestConfig,
    index: Option<&DVector<T>>,
    subperiods: &[SubPeriod],
) -> Result<BacktestReport> {
    cfg.validate()?;
    if cfg.strategy == Strategy::Index {
        let series = index
            .ok_or_else(|| Error::Config("strategy 'index' needs an index return series".into()))?;
        if series.len() != panel.n_periods() {
            return Err(Error::DimensionMismatch(format!(
                "index series has {} periods, panel has {}",
                series.len(),
                panel.n_periods()
            )));
        }
        let single = ReturnsPanel::new(
            DMatrix::from_row_slice(1, series.len(), series.as_slice()),
            vec!["index".into()],
            panel.dates.clone(),
            panel.risk_free.clone(),
        )?;
        let ew = BacktestConfig {
            strategy: Strategy::Ew,
            ..cfg.clone()
        };
        let mut report = rolling_backtest(&single, &ew, None, subperiods)?;
        report.strategy = Strategy::Index;
        return Ok(report);
    }
    let t_total = panel.n_periods();
    if t_total < cfg.train_len + 2 {
        return Err(Error::Config(format!(
            "panel of {t_total} periods is too short for train_len {} and two test periods",
            cfg.train_len
        )));
    }
    let windows = make_windows(
        t_total,
        cfg.train_len,
        None,
        cfg.validation_fraction,
        cfg.expanding,
    )?;
    let grid: Vec<T> = cfg.lambda_grid.iter().map(|&l| T::lit(l)).collect();
    let tune = cfg.strategy.is_sparse() && !grid.is_empty();

    let mut path: Vec<DVector<T>> = Vec::with_capacity(windows.len());
    let mut lambdas: Vec<Option<T>> = Vec::with_capacity(windows.len());
    let mut rebalances = Vec::new();
    for (i, w) in windows.iter().enumerate() {
        let s = w.test_index;
        if i % cfg.rebalance_every != 0 {
            let prev = &path[i - 1];
            let r = panel.returns.column(s - 1).into_owned();
            let rf = panel.risk_free[s - 1];
            let held = drift(prev, &r, rf, prev.dot(&r), i - 1)?;
            path.push(held);
            lambdas.push(None);
            continue;
        }
        let date = panel.dates[s].clone();
        let step = || -> Result<(DVector<T>, Option<T>)> {
            let window = panel
                .returns
                .columns(w.window_start(), w.window_len())
                .into_owned();
            let lambda = if tune {
                let train = panel
                    .returns
                    .columns(w.train_start, w.train_end + 1 - w.train_start)
                    .into_owned();
                let val = panel
                    .returns
                    .columns(
                        w.validation_start,
                        w.validation_end + 1 - w.validation_start,
                    )
                    .into_owned();
                Some(tune_lambda_sharpe(&train, &val, &grid, cfg)?)
            } else {
                None
            };
            let weights = strategy_weights(&window, lambda, cfg)?;
            if let Some(bad) = weights.iter().find(|v| !v.finite()) {
                return Err(Error::Validation(format!("non-finite weight {bad}")));
            }
            Ok((weights, lambda))
        };
        let (weights, lambda) = step().map_err(|e| Error::Rebalance {
            date: date.clone(),
            source: Box::new(e),
        })?;
        log::debug!("rebalanced at {date} (lambda {lambda:?})");
        rebalances.push(RebalanceRecord {
            date,
            lambda: lambda.map(|l| l.as_f64()),
            weights: weights.iter().map(|v| v.as_f64()).collect(),
        });
        path.push(weights);
        lambdas.push(lambda);
    }

    let tests: Vec<usize> = windows.iter().map(|w| w.test_index).collect();
    let returns: Vec<DVector<T>> = tests
        .iter()
        .map(|&s| panel.returns.column(s).into_owned())
        .collect();
    let rf: Vec<T> = tests.iter().map(|&s| panel.risk_free[s]).collect();
    let gross_perf = perf_no_tc(&path, &returns)?;
    let costed = perf_with_tc(
        &path,
        &returns,
        &rf,
        T::lit(cfg.transaction_cost),
        cfg.drift,
    )?;

    let per_period: Vec<PeriodRecord> = tests
        .iter()
        .enumerate()
        .map(|(i, &s)| PeriodRecord {
            date: panel.dates[s].clone(),
            gross: costed.gross[i].as_f64(),
            net: costed.net[i].as_f64(),
            turnover: costed.turnover[i].as_f64(),
            rebalanced: i % cfg.rebalance_every == 0,
            lambda: lambdas[i].map(|l| l.as_f64()),
        })
        .collect();
    let aggregates = Aggregates {
        mean: gross_perf.mean.as_f64(),
        sd: gross_perf.sd.as_f64(),
        sharpe: gross_perf.sharpe.as_f64(),
        mean_tc: costed.performance.mean.as_f64(),
        sd_tc: costed.performance.sd.as_f64(),
        sharpe_tc: costed.performance.sharpe.as_f64(),
        turnover: costed.mean_turnover.as_f64(),
    };
    let subperiods = subperiod_table(&per_period, subperiods)?;
    Ok(BacktestReport {
        strategy: cfg.strategy,
        asset_ids: panel.asset_ids.clone(),
        per_period,
        rebalances,
        aggregates,
        subperiods,
    })
}

/// `label,start_date,end_date` with a header row.
pub fn read_subperiods<R: Read>(input: R) -> Result<Vec<SubPeriod>> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(input);
    let headers = reader.headers()?.clone();
    let expected = ["label", "start_date", "end_date"];
    if headers.len() != 3 || headers.iter().zip(expected).any(|(h, e)| h != e) {
        return Err(Error::Parse {
            row: 1,
            column: headers.iter().collect::<Vec<_>>().join(","),
            message: "expected header label,start_date,end_date".into(),
        });
    }
    let mut out = Vec::new();
    for (i, rec) in reader.deserialize::<SubPeriod>().enumerate() {
        let sp = rec.map_err(|e| Error::Parse {
            row: i + 2,
            column: "label".into(),
            message: e.to_string(),
        })?;
        if date_before(&sp.end_date, &sp.start_date) {
            return Err(Error::Parse {
                row: i + 2,
                column: "end_date".into(),
                message: format!(
                    "end date {} precedes start date {}",
                    sp.end_date, sp.start_date
                ),
            });
        }
        out.push(sp);
    }
    Ok(out)
}

pub fn load_subperiods(path: &Path) -> Result<Vec<SubPeriod>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_subperiods(file)
}

/// Per-period ledger: `date,gross,net,turnover,rebalanced,lambda`.
pub fn write_ledger_csv<W: Write>(report: &BacktestReport, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["date", "gross", "net", "turnover", "rebalanced", "lambda"])?;
    for r in &report.per_period {
        w.write_record([
            r.date.clone(),
            r.gross.to_string(),
            r.net.to_string(),
            r.turnover.to_string(),
            r.rebalanced.to_string(),
            r.lambda.map(|l| l.to_string()).unwrap_or_default(),
        ])?;
    }
    w.flush().map_err(|e| Error::io("ledger", e))?;
    Ok(())
}

/// Sub-period table: `label,start_date,end_date,n_periods,cer,risk`.
pub fn write_subperiods_csv<W: Write>(rows: &[SubPeriodResult], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "label",
        "start_date",
        "end_date",
        "n_periods",
        "cer",
        "risk",
    ])?;
    for r in rows {
        w.write_record([
            r.label.clone(),
            r.start_date.clone(),
            r.end_date.clone(),
            r.n_periods.to_string(),
            r.cer.to_string(),
            r.risk.map(|v| v.to_string()).unwrap_or_default(),
        ])?;
    }
    w.flush().map_err(|e| Error::io("sub-period table", e))?;
    Ok(())
}
