//! Precision-matrix estimators.
//!
//! * [`nodewise`]: one Lasso per asset regressing it on all others, assembled
//!   into `Theta = T^-2 C` with `C_jj = 1`, `C_jk = -gamma_jk` and
//!   `tau_j^2 = ||r_j - R_-j gamma_j||^2/T + lambda_j ||gamma_j||_1`.
//! * [`fmb`]: PCA factors, nodewise on the residuals, then the
//!   Sherman-Morrison-Woodbury recombination [`smw_combine`].
//! * [`augment_and_estimate`]: the same pipeline on returns stacked under
//!   tradable observed factors.
//!
//! Nodewise and FMB outputs are passed through [`symmetrize`] and then
//! [`eigenvalue_clean`], so downstream weight formulas always see a symmetric
//! positive definite matrix.

use std::io::{BufRead, Write};

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::factors::{estimate_pca, residualize_observed, select_num_factors, FactorDecomposition};
use crate::linalg::{
    condition_estimate, demean_rows, inverse_spd, sample_covariance, sym_eigen_desc,
};
use crate::scalar::Scalar;
use crate::solver::{gic_search, lambda_grid, GramProblem, LassoOptions, PathLimits};

const TAU_SQ_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PrecisionMethod {
    Mb,
    Fmb,
    SampleInverse,
}

impl PrecisionMethod {
    pub fn label(self) -> &'static str {
        match self {
            PrecisionMethod::Mb => "mb",
            PrecisionMethod::Fmb => "fmb",
            PrecisionMethod::SampleInverse => "sample_inverse",
        }
    }
}

/// How each nodewise regression picks its penalty.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LambdaRule<T> {
    /// Per-column GIC minimizer over a geometric path.
    Gic,
    /// The same penalty for every column.
    Fixed(T),
}

impl<T: Scalar> LambdaRule<T> {
    pub fn label(&self) -> String {
        match self {
            LambdaRule::Gic => "gic".into(),
            LambdaRule::Fixed(l) => format!("fixed({l})"),
        }
    }
}

/// Number of PCA factors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FactorCount {
    Fixed(usize),
    /// Bai-Ng `IC_p2` over `1..=k_max` (capped at `min(p, T)/2`).
    Auto {
        k_max: usize,
    },
}

#[derive(Debug, Clone, Copy)]
pub struct NodewiseOptions<T> {
    pub lambda_rule: LambdaRule<T>,
    pub grid_points: usize,
    pub grid_min_ratio: T,
    pub lasso: LassoOptions<T>,
    /// Exclude GIC candidates whose support exceeds half the sample size, or
    /// half the rank of the sample covariance when that is singular.
    pub cap_support: bool,
    /// Stop a GIC path after this many grid points without improvement.
    pub patience: Option<usize>,
}

impl<T: Scalar> Default for NodewiseOptions<T> {
    fn default() -> Self {
        Self {
            lambda_rule: LambdaRule::Gic,
            grid_points: 100,
            grid_min_ratio: T::lit(1e-3),
            lasso: LassoOptions::default(),
            cap_support: true,
            patience: Some(10),
        }
    }
}

#[derive(Debug, Clone)]
pub struct PrecisionEstimate<T> {
    pub theta: DMatrix<T>,
    pub method: PrecisionMethod,
    pub lambdas: DVector<T>,
    pub taus_sq: DVector<T>,
    pub cleaned: bool,
    /// Factor count used (FMB only).
    pub k: Option<usize>,
    /// The matrix before symmetrization and eigenvalue cleaning.
    pub pre_cleaning: Option<DMatrix<T>>,
    pub warnings: Vec<String>,
}

impl<T: Scalar> PrecisionEstimate<T> {
    pub fn dim(&self) -> usize {
        self.theta.nrows()
    }

    /// Multiplies `theta` by a positive constant, keeping the metadata.
    pub fn scaled(&self, c: T) -> Self {
        let mut out = self.clone();
        out.theta *= c;
        out
    }
}

/// Raw nodewise output before symmetrization and cleaning.
#[derive(Debug, Clone)]
pub struct NodewiseRaw<T> {
    /// `T^-2 C`
    pub theta: DMatrix<T>,
    /// Row `j` holds `gamma_j` scattered into `p` slots (zero on the diagonal).
    pub gammas: DMatrix<T>,
    pub lambdas: DVector<T>,
    pub taus_sq: DVector<T>,
    /// Centered sample covariance the regressions were run on.
    pub covariance: DMatrix<T>,
    pub warnings: Vec<String>,
}

impl<T: Scalar> NodewiseRaw<T> {
    /// `|| Sigma Theta'_j - e_j ||_inf` for every `j`, with `Theta'_j` the
    /// `j`-th row of the raw estimate written as a column.
    pub fn extended_kkt_residuals(&self) -> Vec<T> {
        let p = self.theta.nrows();
        let prod = &self.covariance * self.theta.transpose();
        (0..p)
            .map(|j| {
                prod.column(j)
                    .iter()
                    .enumerate()
                    .fold(T::zero(), |acc, (i, v)| {
                        let target = if i == j { T::one() } else { T::zero() };
                        acc.max((*v - target).abs())
                    })
            })
            .collect()
    }

    /// `lambda_j / tau_j^2`, the bound the residuals above must respect.
    pub fn extended_kkt_bounds(&self) -> Vec<T> {
        self.lambdas
            .iter()
            .zip(self.taus_sq.iter())
            .map(|(l, t)| *l / *t)
            .collect()
    }
}

struct ColumnFit<T> {
    gamma: DVector<T>,
    lambda: T,
    tau_sq: T,
    floored: bool,
}

fn fit_column<T: Scalar>(
    cov: &DMatrix<T>,
    j: usize,
    n_obs: usize,
    cap: Option<usize>,
    opts: &NodewiseOptions<T>,
) -> Result<ColumnFit<T>> {
    let p = cov.nrows();
    let idx: Vec<usize> = (0..p).filter(|&k| k != j).collect();
    let q = idx.len();
    let problem = GramProblem {
        gram: DMatrix::from_fn(q, q, |a, b| cov[(idx[a], idx[b])]),
        xty: DVector::from_fn(q, |a, _| cov[(idx[a], j)]),
        yy: cov[(j, j)],
        n_obs,
    };
    let (lambda, state) = match opts.lambda_rule {
        LambdaRule::Fixed(lambda) => {
            let mut state = problem.cold_state();
            problem.solve(lambda, &mut state, &opts.lasso)?;
            (lambda, state)
        }
        LambdaRule::Gic => {
            let grid = lambda_grid(problem.lambda_max(), opts.grid_points, opts.grid_min_ratio);
            let limits = PathLimits {
                max_support: cap,
                patience: opts.patience,
            };
            let choice = gic_search(&problem, &grid, p, &opts.lasso, limits)?;
            let mut state = problem.cold_state();
            state.grad = &problem.xty - &problem.gram * &choice.beta;
            state.beta = choice.beta;
            (choice.lambda, state)
        }
    };
    let l1 = state.beta.iter().fold(T::zero(), |a, v| a + v.abs());
    let raw_tau = problem.rss_over_n(&state) + lambda * l1;
    let floor = T::lit(TAU_SQ_FLOOR);
    let floored = raw_tau < floor;
    Ok(ColumnFit {
        gamma: state.beta,
        lambda,
        tau_sq: raw_tau.max(floor),
        floored,
    })
}

/// Largest admissible GIC support: `T/2`, or half the numerical rank of the
/// covariance when it is singular (PCA residuals lose `K` dimensions). Near
/// the rank every column is fitted almost perfectly and GIC diverges.
fn support_cap<T: Scalar>(cov: &DMatrix<T>, n_obs: usize) -> usize {
    let p = cov.nrows();
    let vals = crate::linalg::sym_eigenvalues_desc(cov);
    let floor = vals[0] * T::lit(1e-10);
    let rank = vals.iter().filter(|v| **v > floor).count();
    let cap = if rank < p { rank / 2 } else { n_obs / 2 };
    cap.max(1)
}

/// Nodewise regression without symmetrization or cleaning. The panel is `p x T`
/// and is demeaned per asset internally.
pub fn nodewise_raw<T: Scalar>(
    panel: &DMatrix<T>,
    opts: &NodewiseOptions<T>,
) -> Result<NodewiseRaw<T>> {
    let (p, t) = panel.shape();
    if p < 2 {
        return Err(Error::Validation(format!(
            "nodewise regression needs p >= 2, got {p}"
        )));
    }
    if t < 3 {
        return Err(Error::Validation(format!(
            "nodewise regression needs T >= 3, got {t}"
        )));
    }
    if panel.iter().any(|v| !v.finite()) {
        return Err(Error::Validation("panel contains non-finite values".into()));
    }
    let (rc, _) = demean_rows(panel);
    let n = T::from_count(t);
    let cov = crate::linalg::symmetrized(&((&rc * rc.transpose()) / n));
    let scale = (0..p).fold(T::zero(), |a, i| a.max(cov[(i, i)]));
    for j in 0..p {
        if cov[(j, j)] <= scale * T::lit(1e-14) {
            return Err(Error::DegenerateAsset(format!("index {j}")));
        }
    }

    let cap = opts.cap_support.then(|| support_cap(&cov, t));
    let fits: Vec<ColumnFit<T>> = (0..p)
        .into_par_iter()
        .map(|j| fit_column(&cov, j, t, cap, opts))
        .collect::<Result<_>>()?;

    let mut theta = DMatrix::zeros(p, p);
    let mut gammas = DMatrix::zeros(p, p);
    let mut warnings = Vec::new();
    for (j, fit) in fits.iter().enumerate() {
        if fit.floored {
            let msg =
                format!("tau^2 for column {j} floored at {TAU_SQ_FLOOR:e} (near-perfect fit)");
            log::warn!("{msg}");
            warnings.push(msg);
        }
        let inv_tau = T::one() / fit.tau_sq;
        theta[(j, j)] = inv_tau;
        let mut a = 0;
        for k in 0..p {
            if k == j {
                continue;
            }
            gammas[(j, k)] = fit.gamma[a];
            theta[(j, k)] = -fit.gamma[a] * inv_tau;
            a += 1;
        }
    }
    Ok(NodewiseRaw {
        theta,
        gammas,
        lambdas: DVector::from_iterator(p, fits.iter().map(|f| f.lambda)),
        taus_sq: DVector::from_iterator(p, fits.iter().map(|f| f.tau_sq)),
        covariance: cov,
        warnings,
    })
}

/// Nodewise (MB) precision estimate, symmetrized and eigenvalue-cleaned.
pub fn nodewise<T: Scalar>(
    panel: &DMatrix<T>,
    opts: &NodewiseOptions<T>,
) -> Result<PrecisionEstimate<T>> {
    let raw = nodewise_raw(panel, opts)?;
    let mut warnings = raw.warnings;
    let cleaned = clean(&raw.theta, &mut warnings)?;
    Ok(PrecisionEstimate {
        theta: cleaned,
        method: PrecisionMethod::Mb,
        lambdas: raw.lambdas,
        taus_sq: raw.taus_sq,
        cleaned: true,
        k: None,
        pre_cleaning: Some(raw.theta),
        warnings,
    })
}

fn clean<T: Scalar>(theta: &DMatrix<T>, warnings: &mut Vec<String>) -> Result<DMatrix<T>> {
    let sym = symmetrize(theta);
    let (cleaned, replaced) = eigenvalue_clean_counted(&sym)?;
    if replaced > 0 {
        let msg = format!("eigenvalue cleaning replaced {replaced} eigenvalue(s)");
        log::debug!("{msg}");
        warnings.push(msg);
    }
    Ok(cleaned)
}

/// Keeps, for each pair `(i, j)`, the entry of smaller magnitude and mirrors it.
/// Equal magnitudes keep the upper-triangle entry.
pub fn symmetrize<T: Scalar>(theta: &DMatrix<T>) -> DMatrix<T> {
    let p = theta.nrows();
    let mut out = theta.clone();
    for i in 0..p {
        for j in (i + 1)..p {
            let (a, b) = (theta[(i, j)], theta[(j, i)]);
            let v = if a.abs() <= b.abs() { a } else { b };
            out[(i, j)] = v;
            out[(j, i)] = v;
        }
    }
    out
}

/// Raises every eigenvalue below the smallest positive one up to it.
///
/// An eigenvalue counts as positive when it exceeds `1e-12` times the
/// largest eigenvalue magnitude, so rounding noise around zero is not
/// mistaken for the floor.
pub fn eigenvalue_clean<T: Scalar>(theta_s: &DMatrix<T>) -> Result<DMatrix<T>> {
    eigenvalue_clean_counted(theta_s).map(|(m, _)| m)
}

fn eigenvalue_clean_counted<T: Scalar>(theta_s: &DMatrix<T>) -> Result<(DMatrix<T>, usize)> {
    if !theta_s.is_square() {
        return Err(Error::DimensionMismatch(
            "eigenvalue cleaning needs a square matrix".into(),
        ));
    }
    let (vals, vecs) = sym_eigen_desc(theta_s);
    let scale = vals.iter().fold(T::zero(), |a, v| a.max(v.abs()));
    let threshold = scale * T::lit(1e-12);
    let floor = vals
        .iter()
        .filter(|v| **v > threshold)
        .fold(None, |acc: Option<T>, v| {
            Some(acc.map_or(*v, |a| a.min(*v)))
        })
        .ok_or(Error::NoPositiveEigenvalue)?;
    let replaced = vals.iter().filter(|v| **v < floor).count();
    if replaced == 0 {
        return Ok((theta_s.clone(), 0));
    }
    let cleaned_vals = vals.map(|v| v.max(floor));
    let rebuilt = &vecs * DMatrix::from_diagonal(&cleaned_vals) * vecs.transpose();
    Ok((crate::linalg::symmetrized(&rebuilt), replaced))
}

/// `Theta_e - Theta_e B [Theta_f + B' Theta_e B]^-1 B' Theta_e`.
pub fn smw_combine<T: Scalar>(
    theta_eps: &DMatrix<T>,
    loadings: &DMatrix<T>,
    theta_f: &DMatrix<T>,
) -> Result<DMatrix<T>> {
    let p = theta_eps.nrows();
    let k = loadings.ncols();
    if !theta_eps.is_square() || loadings.nrows() != p || theta_f.shape() != (k, k) {
        return Err(Error::DimensionMismatch(format!(
            "SMW inputs: theta_eps {:?}, loadings {:?}, theta_f {:?}",
            theta_eps.shape(),
            loadings.shape(),
            theta_f.shape()
        )));
    }
    if k == 0 {
        return Ok(theta_eps.clone());
    }
    let eb = theta_eps * loadings;
    let inner = crate::linalg::symmetrized(&(theta_f + loadings.transpose() * &eb));
    let inner_inv = inverse_spd(&inner, "Sherman-Morrison-Woodbury inner matrix")?;
    Ok(theta_eps - &eb * inner_inv * eb.transpose())
}

fn resolve_k<T: Scalar>(panel: &DMatrix<T>, k: &FactorCount) -> Result<usize> {
    match *k {
        FactorCount::Fixed(k) => Ok(k),
        FactorCount::Auto { k_max } => {
            let (p, t) = panel.shape();
            let cap = (p.min(t) / 2).max(1);
            select_num_factors(panel, k_max.min(cap))
        }
    }
}

/// Factor nodewise regression with PCA factors.
///
/// A factor count of zero degenerates to plain nodewise regression on the returns.
pub fn fmb<T: Scalar>(
    panel: &DMatrix<T>,
    k: &FactorCount,
    opts: &NodewiseOptions<T>,
) -> Result<PrecisionEstimate<T>> {
    let k = resolve_k(panel, k)?;
    if k == 0 {
        return nodewise(panel, opts);
    }
    let dec = estimate_pca(panel, k)?;
    fmb_from_decomposition(&dec, opts)
}

/// Factor nodewise regression with observed (e.g. Fama-French) factors.
pub fn fmb_observed<T: Scalar>(
    panel: &DMatrix<T>,
    observed_factors: &DMatrix<T>,
    opts: &NodewiseOptions<T>,
) -> Result<PrecisionEstimate<T>> {
    let dec = residualize_observed(panel, observed_factors)?;
    if dec.k == 0 {
        return nodewise(panel, opts);
    }
    fmb_from_decomposition(&dec, opts)
}

fn fmb_from_decomposition<T: Scalar>(
    dec: &FactorDecomposition<T>,
    opts: &NodewiseOptions<T>,
) -> Result<PrecisionEstimate<T>> {
    let theta_f = inverse_spd(&dec.factor_covariance(), "factor covariance")?;
    let eps = nodewise(&dec.residuals, opts)?;
    let combined = smw_combine(&eps.theta, &dec.loadings, &theta_f)?;
    let mut warnings = eps.warnings;
    let theta = clean(&combined, &mut warnings)?;
    Ok(PrecisionEstimate {
        theta,
        method: PrecisionMethod::Fmb,
        lambdas: eps.lambdas,
        taus_sq: eps.taus_sq,
        cleaned: true,
        k: Some(dec.k),
        pre_cleaning: Some(combined),
        warnings,
    })
}

/// Precision of `x_t = (f_t', r_t')'`, observed factors stacked on top of the
/// returns, via FMB with `k2` PCA factors. Output is `(K1 + p) x (K1 + p)`.
pub fn augment_and_estimate<T: Scalar>(
    panel: &DMatrix<T>,
    observed_factors: &DMatrix<T>,
    k2: &FactorCount,
    opts: &NodewiseOptions<T>,
) -> Result<PrecisionEstimate<T>> {
    let k1 = observed_factors.nrows();
    if k1 == 0 {
        return fmb(panel, k2, opts);
    }
    let (p, t) = panel.shape();
    if observed_factors.ncols() != t {
        return Err(Error::DimensionMismatch(format!(
            "observed factors span {} periods, panel spans {t}",
            observed_factors.ncols()
        )));
    }
    let mut stacked = DMatrix::zeros(k1 + p, t);
    stacked.rows_mut(0, k1).copy_from(observed_factors);
    stacked.rows_mut(k1, p).copy_from(panel);
    let mut est = fmb(&stacked, k2, opts)?;
    let condition = condition_estimate(&sample_covariance(&stacked));
    if condition > 1e12 {
        let msg = format!(
            "augmented covariance is numerically singular (condition {condition:e}); \
             eigenvalue cleaning enforces positive definiteness"
        );
        log::warn!("{msg}");
        est.warnings.push(msg);
    }
    Ok(est)
}

/// Inverse of the centered sample covariance; needs `p < T`.
pub fn sample_inverse<T: Scalar>(panel: &DMatrix<T>) -> Result<PrecisionEstimate<T>> {
    let p = panel.nrows();
    let theta = inverse_spd(&sample_covariance(panel), "sample covariance")?;
    let taus_sq = DVector::from_fn(p, |i, _| T::one() / theta[(i, i)]);
    Ok(PrecisionEstimate {
        theta,
        method: PrecisionMethod::SampleInverse,
        lambdas: DVector::zeros(p),
        taus_sq,
        cleaned: false,
        k: None,
        pre_cleaning: None,
        warnings: Vec::new(),
    })
}

/// Default nodewise options with the 100-point path; kept for callers that
/// only want to override the penalty rule.
pub fn options_with_rule<T: Scalar>(rule: LambdaRule<T>) -> NodewiseOptions<T> {
    NodewiseOptions {
        lambda_rule: rule,
        ..NodewiseOptions::default()
    }
}

/// Precision matrix read back from a dump file.
#[derive(Debug, Clone)]
pub struct PrecisionDump {
    pub method: String,
    pub lambda_rule: String,
    pub k: Option<usize>,
    pub asset_ids: Vec<String>,
    pub theta: DMatrix<f64>,
}

/// Writes `theta` as CSV preceded by `# key=value` metadata lines.
pub fn write_precision_csv<T: Scalar, W: Write>(
    est: &PrecisionEstimate<T>,
    lambda_rule: &str,
    asset_ids: &[String],
    mut out: W,
) -> Result<()> {
    let p = est.dim();
    if asset_ids.len() != p {
        return Err(Error::DimensionMismatch(format!(
            "{} asset ids for a {p}x{p} precision matrix",
            asset_ids.len()
        )));
    }
    let io = |e| Error::io("<precision dump>", e);
    writeln!(out, "# method={}", est.method.label()).map_err(io)?;
    writeln!(out, "# lambda_rule={lambda_rule}").map_err(io)?;
    match est.k {
        Some(k) => writeln!(out, "# k={k}").map_err(io)?,
        None => writeln!(out, "# k=none").map_err(io)?,
    }
    writeln!(out, "# cleaned={}", est.cleaned).map_err(io)?;
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["asset".to_string()];
    header.extend(asset_ids.iter().cloned());
    w.write_record(&header)?;
    for (i, id) in asset_ids.iter().enumerate() {
        let mut row = vec![id.clone()];
        row.extend((0..p).map(|j| format!("{}", est.theta[(i, j)].as_f64())));
        w.write_record(&row)?;
    }
    w.flush().map_err(io)?;
    Ok(())
}

pub fn read_precision_csv<R: BufRead>(input: R) -> Result<PrecisionDump> {
    let mut method = String::new();
    let mut lambda_rule = String::new();
    let mut k = None;
    let mut body = String::new();
    for line in input.lines() {
        let line = line.map_err(|e| Error::io("<precision dump>", e))?;
        if let Some(meta) = line.strip_prefix("# ") {
            if let Some((key, value)) = meta.split_once('=') {
                match key {
                    "method" => method = value.to_string(),
                    "lambda_rule" => lambda_rule = value.to_string(),
                    "k" => k = value.parse().ok(),
                    _ => {}
                }
            }
        } else {
            body.push_str(&line);
            body.push('\n');
        }
    }
    let mut rdr = csv::Reader::from_reader(body.as_bytes());
    let asset_ids: Vec<String> = rdr.headers()?.iter().skip(1).map(str::to_string).collect();
    let p = asset_ids.len();
    let mut theta = DMatrix::zeros(p, p);
    let mut rows = 0;
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        if i >= p || rec.len() != p + 1 {
            return Err(Error::Validation("precision dump is not square".into()));
        }
        for j in 0..p {
            theta[(i, j)] = rec[j + 1].parse::<f64>().map_err(|e| Error::Parse {
                row: i + 2,
                column: (j + 2).to_string(),
                message: e.to_string(),
            })?;
        }
        rows += 1;
    }
    if rows != p {
        return Err(Error::Validation("precision dump is not square".into()));
    }
    Ok(PrecisionDump {
        method,
        lambda_rule,
        k,
        asset_ids,
        theta,
    })
}
