//! Monte Carlo comparison of MRC weight estimators.
//!
//! Returns follow `r_t = m + B f_t + eps_t` with Toeplitz idiosyncratic
//! covariance. The mean is replaced by `Sigma alpha`, where `alpha` keeps the
//! `ceil(p/2)` largest entries of `Sigma^-1 m`, so the MRC weights
//! `sigma alpha / sqrt(alpha' Sigma alpha)` are sparse by construction.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{ChiSquared, Distribution as _, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{inverse_spd, row_means};
use crate::precision::{fmb, FactorCount, NodewiseOptions};
use crate::scalar::Scalar;
use crate::solver::LassoOptions;
use crate::weights::{
    debias, debias_remainder, mrc, mrc_lasso_gic, post_lasso_from_weights, second_moment_precision,
    sharpe_state, InnerFormulation, PostLassoConfig, Target,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ReturnDistribution {
    Gaussian,
    /// Factors and idiosyncratic errors jointly multivariate t with `nu` degrees of freedom.
    EllipticalT {
        nu: f64,
    },
}

fn default_delta() -> f64 {
    0.85
}
fn default_t_grid() -> Vec<usize> {
    vec![128, 181, 256, 362]
}
fn default_k() -> usize {
    3
}
fn default_rho() -> f64 {
    0.5
}
fn default_distribution() -> ReturnDistribution {
    ReturnDistribution::Gaussian
}
fn default_replications() -> usize {
    50
}
fn default_sigma() -> f64 {
    0.05
}
fn default_threshold() -> f64 {
    1e-4
}
fn default_max_fail_fraction() -> f64 {
    0.05
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationConfig {
    /// 1: `p = floor(T^delta)`; 2: `p = floor(3 T^delta)`.
    pub case: u8,
    #[serde(default = "default_delta")]
    pub delta: f64,
    #[serde(default = "default_t_grid")]
    pub t_grid: Vec<usize>,
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default = "default_rho")]
    pub rho: f64,
    #[serde(default = "default_distribution")]
    pub distribution: ReturnDistribution,
    #[serde(default = "default_replications")]
    pub replications: usize,
    pub seed: u64,
    /// Risk target of the MRC weights, shared by truth and estimators.
    #[serde(default = "default_sigma")]
    pub sigma: f64,
    /// Post-Lasso selection threshold.
    #[serde(default = "default_threshold")]
    pub threshold: f64,
    /// Post-Lasso sample-inverse cutoff; `None` means `min(T/2, 30)`.
    #[serde(default)]
    pub fallback_size: Option<usize>,
    /// The run stops when more replications than this fraction fail at one `T`.
    #[serde(default = "default_max_fail_fraction")]
    pub max_fail_fraction: f64,
}

impl SimulationConfig {
    pub fn new(case: u8, seed: u64) -> Self {
        Self {
            case,
            delta: default_delta(),
            t_grid: default_t_grid(),
            k: default_k(),
            rho: default_rho(),
            distribution: default_distribution(),
            replications: default_replications(),
            seed,
            sigma: default_sigma(),
            threshold: default_threshold(),
            fallback_size: None,
            max_fail_fraction: default_max_fail_fraction(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.case != 1 && self.case != 2 {
            return bad(format!("case must be 1 or 2, got {}", self.case));
        }
        if !(self.delta > 0.0 && self.delta <= 1.0) {
            return bad(format!("delta must lie in (0, 1], got {}", self.delta));
        }
        if !(self.rho > -1.0 && self.rho < 1.0) {
            return bad(format!("rho must lie in (-1, 1), got {}", self.rho));
        }
        if let ReturnDistribution::EllipticalT { nu } = self.distribution {
            if !(nu > 2.0) {
                return bad(format!("nu must exceed 2 for finite variance, got {nu}"));
            }
        }
        if self.replications == 0 {
            return bad("replications must be >= 1".into());
        }
        if self.t_grid.is_empty() {
            return bad("T grid is empty".into());
        }
        if !(self.sigma > 0.0) {
            return bad(format!("sigma must be positive, got {}", self.sigma));
        }
        if !(self.threshold >= 0.0) {
            return bad("threshold must be >= 0".into());
        }
        for &t in &self.t_grid {
            let p = self.dimension(t);
            if t < 8 || p < 2 || self.k >= p.min(t) {
                return bad(format!(
                    "T = {t} gives p = {p}, too small for K = {}",
                    self.k
                ));
            }
        }
        Ok(())
    }

    /// Number of assets at sample size `t`.
    pub fn dimension(&self, t: usize) -> usize {
        let base = (t as f64).powf(self.delta);
        let scale = if self.case == 2 { 3.0 } else { 1.0 };
        (scale * base).floor() as usize
    }

    pub fn factor_variance(&self) -> f64 {
        match self.distribution {
            ReturnDistribution::Gaussian => 0.1,
            ReturnDistribution::EllipticalT { .. } => 1.0,
        }
    }
}

/// One simulated data set with its population quantities.
#[derive(Debug, Clone)]
pub struct TruthInstance {
    /// `p x T`
    pub panel: DMatrix<f64>,
    pub w_true: DVector<f64>,
    pub sigma_true: DMatrix<f64>,
    pub theta_true: DMatrix<f64>,
    pub mean: DVector<f64>,
    pub loadings: DMatrix<f64>,
    pub sigma_eps: DMatrix<f64>,
}

/// `rho^|i-j|`
pub fn toeplitz(p: usize, rho: f64) -> DMatrix<f64> {
    DMatrix::from_fn(p, p, |i, j| rho.powi(i.abs_diff(j) as i32))
}

/// Deterministic seed for replication `rep` at sample size `t`.
pub fn replication_seed(master: u64, t: usize, rep: usize) -> u64 {
    let mut z = master;
    for v in [t as u64, rep as u64] {
        z = splitmix(z ^ splitmix(v));
    }
    z
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn normal<R: Rng>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

/// Draws `N(0, Toeplitz(rho))` in place by the AR(1) recursion.
fn ar1_draw<R: Rng>(rng: &mut R, rho: f64, out: &mut [f64]) {
    let innov = (1.0 - rho * rho).sqrt();
    let mut prev = 0.0;
    for (i, v) in out.iter_mut().enumerate() {
        let z = normal(rng);
        *v = if i == 0 { z } else { rho * prev + innov * z };
        prev = *v;
    }
}

fn top_half(a: &DVector<f64>) -> DVector<f64> {
    let p = a.len();
    let keep = p.div_ceil(2);
    let mut order: Vec<usize> = (0..p).collect();
    order.sort_by(|&i, &j| {
        a[j].abs()
            .partial_cmp(&a[i].abs())
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let mut out = DVector::zeros(p);
    for &i in &order[..keep] {
        out[i] = a[i];
    }
    out
}

fn generate(config: &SimulationConfig, t: usize, rng: &mut ChaCha8Rng) -> Result<TruthInstance> {
    let p = config.dimension(t);
    let k = config.k;
    let sf = config.factor_variance();
    let m = DVector::from_fn(p, |_, _| 1.0 + normal(rng));
    let loadings = DMatrix::from_fn(p, k, |_, _| 0.1 * normal(rng));
    let sigma_eps = toeplitz(p, config.rho);
    let sigma_true = &loadings * loadings.transpose() * sf + &sigma_eps;
    let theta_true = inverse_spd(&sigma_true, "population covariance")?;
    let alpha = top_half(&(&theta_true * &m));
    let mean = &sigma_true * &alpha;
    let theta_pop = alpha.dot(&mean);
    let w_true = &alpha * (config.sigma / theta_pop.sqrt());

    let sf_sd = sf.sqrt();
    let chi = match config.distribution {
        ReturnDistribution::EllipticalT { nu } => Some((
            nu,
            ChiSquared::new(nu)
                .map_err(|e| Error::Config(format!("chi-square with nu = {nu}: {e}")))?,
        )),
        ReturnDistribution::Gaussian => None,
    };
    let mut panel = DMatrix::zeros(p, t);
    let mut f = DVector::zeros(k);
    let mut eps = vec![0.0; p];
    for col in 0..t {
        for v in f.iter_mut() {
            *v = sf_sd * normal(rng);
        }
        ar1_draw(rng, config.rho, &mut eps);
        // Covariance of the mixture equals the Gaussian covariance.
        let scale = match &chi {
            Some((nu, dist)) => {
                let w: f64 = dist.sample(rng);
                ((nu - 2.0) / w).sqrt()
            }
            None => 1.0,
        };
        let common = &loadings * &f;
        for i in 0..p {
            panel[(i, col)] = mean[i] + scale * (common[i] + eps[i]);
        }
    }
    Ok(TruthInstance {
        panel,
        w_true,
        sigma_true,
        theta_true,
        mean,
        loadings,
        sigma_eps,
    })
}

/// Gaussian returns at sample size `t`.
pub fn gen_gaussian(
    config: &SimulationConfig,
    t: usize,
    rng: &mut ChaCha8Rng,
) -> Result<TruthInstance> {
    let mut c = config.clone();
    c.distribution = ReturnDistribution::Gaussian;
    generate(&c, t, rng)
}

/// Elliptical returns: `(f, eps)` jointly multivariate t with covariance
/// `diag(I_K, Toeplitz(rho))`.
pub fn gen_elliptical(
    config: &SimulationConfig,
    t: usize,
    rng: &mut ChaCha8Rng,
) -> Result<TruthInstance> {
    match config.distribution {
        ReturnDistribution::EllipticalT { nu } if nu > 2.0 => generate(config, t, rng),
        ReturnDistribution::EllipticalT { nu } => Err(Error::Config(format!(
            "nu must exceed 2 for finite variance, got {nu}"
        ))),
        ReturnDistribution::Gaussian => {
            Err(Error::Config("configuration is not elliptical".into()))
        }
    }
}

/// Draws the data set for `(t, rep)` according to the configured distribution.
pub fn draw_instance(config: &SimulationConfig, t: usize, rep: usize) -> Result<TruthInstance> {
    let mut rng = ChaCha8Rng::seed_from_u64(replication_seed(config.seed, t, rep));
    generate(config, t, &mut rng)
}

pub const ESTIMATORS: [&str; 4] = ["lasso", "debiased", "post_lasso", "nonsparse_fmb"];

/// Weight estimates of one replication; `Err` holds the failure message.
#[derive(Debug, Clone)]
pub struct ReplicationEstimates<T: Scalar> {
    pub lasso: std::result::Result<DVector<T>, String>,
    pub debiased: std::result::Result<DVector<T>, String>,
    pub post_lasso: std::result::Result<DVector<T>, String>,
    pub nonsparse_fmb: std::result::Result<DVector<T>, String>,
    /// `||sqrt(T)(Theta Sigma - I)(w_lasso - w_true)||_inf` when available.
    pub delta_inf: Option<T>,
}

impl<T: Scalar> ReplicationEstimates<T> {
    pub fn get(&self, name: &str) -> &std::result::Result<DVector<T>, String> {
        match name {
            "lasso" => &self.lasso,
            "debiased" => &self.debiased,
            "post_lasso" => &self.post_lasso,
            _ => &self.nonsparse_fmb,
        }
    }
}

/// Runs the four estimators on one panel with risk target `sigma` and `k` PCA factors.
pub fn estimate_replication<T: Scalar>(
    panel: &DMatrix<T>,
    w_true: Option<&DVector<T>>,
    k: usize,
    sigma: T,
    threshold: T,
    fallback_size: Option<usize>,
) -> ReplicationEstimates<T> {
    let fail = |e: Error| e.to_string();
    let nodewise = NodewiseOptions::default();
    let lasso_opts = LassoOptions::default();
    let factors = FactorCount::Fixed(k);
    let base = fmb(panel, &factors, &nodewise).map_err(fail);
    let m_hat = row_means(panel);
    let stage = base.and_then(|est| {
        let state = sharpe_state(&est.theta, &m_hat, Target::Sigma(sigma)).map_err(fail)?;
        Ok((est, state))
    });
    let (est, state) = match stage {
        Ok(v) => v,
        Err(msg) => {
            return ReplicationEstimates {
                lasso: Err(msg.clone()),
                debiased: Err(msg.clone()),
                post_lasso: Err(msg.clone()),
                nonsparse_fmb: Err(msg),
                delta_inf: None,
            }
        }
    };
    let nonsparse_fmb = mrc(&est.theta, &m_hat, sigma)
        .map(|w| w.weights)
        .map_err(fail);
    let lasso = mrc_lasso_gic(panel, state.y_hat, &lasso_opts).map_err(fail);
    let mut delta_inf = None;
    let debiased = lasso.as_ref().map_err(Clone::clone).and_then(|wl| {
        let theta2 = second_moment_precision(&est.theta, &m_hat).map_err(fail)?;
        if let Some(w0) = w_true {
            delta_inf = Some(debias_remainder(&theta2, panel, &wl.weights, w0));
        }
        debias(wl, &theta2, panel, state.y_hat)
            .map(|(w, _)| w.weights)
            .map_err(fail)
    });
    let post_cfg = PostLassoConfig {
        threshold,
        inner: InnerFormulation::Mrc,
        mu: None,
        sigma: Some(sigma),
        fallback_size,
        factors,
        nodewise,
    };
    let post_lasso = lasso.as_ref().map_err(Clone::clone).and_then(|wl| {
        post_lasso_from_weights(panel, &wl.weights, &post_cfg)
            .map(|w| w.weights)
            .map_err(fail)
    });
    ReplicationEstimates {
        lasso: lasso.map(|w| w.weights),
        debiased,
        post_lasso,
        nonsparse_fmb,
        delta_inf,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorCurveRow {
    #[serde(rename = "T")]
    pub t: usize,
    pub estimator: String,
    pub mean_l1_error: f64,
    pub stderr: f64,
    pub n_fail: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaRow {
    #[serde(rename = "T")]
    pub t: usize,
    pub p: usize,
    pub mean_delta_inf: f64,
}

#[derive(Debug, Clone)]
pub struct ErrorCurves {
    pub rows: Vec<ErrorCurveRow>,
    pub delta: Vec<DeltaRow>,
    /// Failure messages as `(T, replication, estimator, message)`.
    pub failures: Vec<(usize, usize, String, String)>,
}

impl ErrorCurves {
    pub fn mean_error(&self, t: usize, estimator: &str) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.t == t && r.estimator == estimator)
            .map(|r| r.mean_l1_error)
    }
}

fn l1(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).sum()
}

/// Mean l1 weight error of each estimator at every `T` in the grid.
pub fn run_error_curves(config: &SimulationConfig) -> Result<ErrorCurves> {
    config.validate()?;
    let mut rows = Vec::new();
    let mut delta = Vec::new();
    let mut failures = Vec::new();
    for &t in &config.t_grid {
        let results: Vec<Result<(DVector<f64>, ReplicationEstimates<f64>)>> = (0..config
            .replications)
            .into_par_iter()
            .map(|rep| {
                let inst = draw_instance(config, t, rep)?;
                let est = estimate_replication(
                    &inst.panel,
                    Some(&inst.w_true),
                    config.k,
                    config.sigma,
                    config.threshold,
                    config.fallback_size,
                );
                Ok((inst.w_true, est))
            })
            .collect();
        let results = results.into_iter().collect::<Result<Vec<_>>>()?;
        let limit = (config.max_fail_fraction * config.replications as f64).floor() as usize;
        for name in ESTIMATORS {
            let mut errs = Vec::with_capacity(results.len());
            let mut n_fail = 0;
            for (rep, (w_true, est)) in results.iter().enumerate() {
                match est.get(name) {
                    Ok(w) => errs.push(l1(w, w_true)),
                    Err(msg) => {
                        n_fail += 1;
                        failures.push((t, rep, name.to_string(), msg.clone()));
                    }
                }
            }
            if n_fail > limit {
                return Err(Error::TooManyFailures {
                    t,
                    failed: n_fail,
                    total: config.replications,
                });
            }
            let n = errs.len() as f64;
            let mean = errs.iter().sum::<f64>() / n;
            let stderr = if errs.len() > 1 {
                (errs.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt() / n.sqrt()
            } else {
                0.0
            };
            rows.push(ErrorCurveRow {
                t,
                estimator: name.to_string(),
                mean_l1_error: mean,
                stderr,
                n_fail,
            });
        }
        let ds: Vec<f64> = results.iter().filter_map(|(_, e)| e.delta_inf).collect();
        if !ds.is_empty() {
            delta.push(DeltaRow {
                t,
                p: config.dimension(t),
                mean_delta_inf: ds.iter().sum::<f64>() / ds.len() as f64,
            });
        }
    }
    Ok(ErrorCurves {
        rows,
        delta,
        failures,
    })
}

pub fn write_error_curves_csv<W: std::io::Write>(rows: &[ErrorCurveRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io("<error curves>", e))?;
    Ok(())
}

pub fn write_delta_csv<W: std::io::Write>(rows: &[DeltaRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io("<delta report>", e))?;
    Ok(())
}
