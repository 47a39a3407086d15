//! Portfolio weights from a precision matrix, and the sparse MRC estimators.
//!
//! Panels are `p x T` throughout the crate; the regression design used by the
//! weight Lasso is its transpose (`T x p`, one row per period).
//!
//! The MRC portfolio `w = sigma / sqrt(theta) * Theta m` with
//! `theta = m' Theta m` is also the population least-squares coefficient of a
//! constant target `y = sigma (1 + theta) / sqrt(theta)` on the returns, which
//! is what makes the Lasso, de-biased and post-Lasso estimators possible.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::row_means;
use crate::precision::{fmb, sample_inverse, FactorCount, NodewiseOptions};
use crate::scalar::Scalar;
use crate::solver::{
    default_grid, lasso_fit, select_lambda_gic_limited, LassoFit, LassoOptions, PathLimits,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InnerFormulation {
    Gmv,
    Mwc,
    Mrc,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Formulation {
    Gmv,
    Mwc,
    Mrc,
    MrcLasso,
    MrcDebiased,
    PostLasso(InnerFormulation),
}

impl Formulation {
    pub fn label(&self) -> String {
        match self {
            Formulation::Gmv => "gmv".into(),
            Formulation::Mwc => "mwc".into(),
            Formulation::Mrc => "mrc".into(),
            Formulation::MrcLasso => "mrc_lasso".into(),
            Formulation::MrcDebiased => "mrc_debiased".into(),
            Formulation::PostLasso(inner) => {
                format!("post_lasso({})", Formulation::from(*inner).label())
            }
        }
    }
}

impl From<InnerFormulation> for Formulation {
    fn from(f: InnerFormulation) -> Self {
        match f {
            InnerFormulation::Gmv => Formulation::Gmv,
            InnerFormulation::Mwc => Formulation::Mwc,
            InnerFormulation::Mrc => Formulation::Mrc,
        }
    }
}

#[derive(Debug, Clone)]
pub struct WeightVector<T> {
    pub weights: DVector<T>,
    pub formulation: Formulation,
    pub support: Vec<usize>,
    pub target_mu: Option<T>,
    pub target_sigma: Option<T>,
    /// Penalty of the underlying Lasso, for sparse formulations.
    pub lambda: Option<T>,
}

impl<T: Scalar> WeightVector<T> {
    fn new(weights: DVector<T>, formulation: Formulation) -> Self {
        let support = nonzero(&weights);
        Self {
            weights,
            formulation,
            support,
            target_mu: None,
            target_sigma: None,
            lambda: None,
        }
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn sum(&self) -> T {
        self.weights.sum()
    }

    /// Indices with `|w| > eps`; used to report sparsity of dense estimates.
    pub fn reporting_support(&self, eps: T) -> Vec<usize> {
        self.weights
            .iter()
            .enumerate()
            .filter(|(_, w)| w.abs() > eps)
            .map(|(i, _)| i)
            .collect()
    }
}

fn nonzero<T: Scalar>(w: &DVector<T>) -> Vec<usize> {
    w.iter()
        .enumerate()
        .filter(|(_, v)| **v != T::zero())
        .map(|(i, _)| i)
        .collect()
}

fn check_square<T: Scalar>(theta: &DMatrix<T>, m: Option<&DVector<T>>) -> Result<()> {
    if !theta.is_square() || theta.nrows() == 0 {
        return Err(Error::DimensionMismatch(format!(
            "precision matrix must be square and nonempty, got {:?}",
            theta.shape()
        )));
    }
    if let Some(m) = m {
        if m.len() != theta.nrows() {
            return Err(Error::DimensionMismatch(format!(
                "mean vector has {} entries, precision is {}x{}",
                m.len(),
                theta.nrows(),
                theta.nrows()
            )));
        }
    }
    Ok(())
}

/// Global minimum variance: `Theta iota / (iota' Theta iota)`.
pub fn gmv<T: Scalar>(theta: &DMatrix<T>) -> Result<WeightVector<T>> {
    check_square(theta, None)?;
    let ones = DVector::from_element(theta.nrows(), T::one());
    let theta_iota = theta * &ones;
    let a = theta_iota.sum();
    if !(a > T::zero()) {
        return Err(Error::NotPositiveDefinite(format!(
            "iota' Theta iota = {a}"
        )));
    }
    let mut w = theta_iota / a;
    let s = w.sum();
    w /= s;
    Ok(WeightVector::new(w, Formulation::Gmv))
}

/// Mean-variance with full investment and target return `mu`:
/// `(1 - a1) w_gmv + a1 w_m`.
pub fn mwc<T: Scalar>(theta: &DMatrix<T>, m: &DVector<T>, mu: T) -> Result<WeightVector<T>> {
    check_square(theta, Some(m))?;
    let ones = DVector::from_element(theta.nrows(), T::one());
    let theta_iota = theta * &ones;
    let theta_m = theta * m;
    let a = theta_iota.sum();
    let b = m.dot(&theta_iota);
    let c = m.dot(&theta_m);
    if !(a > T::zero()) {
        return Err(Error::NotPositiveDefinite(format!(
            "iota' Theta iota = {a}"
        )));
    }
    if !(b > T::zero()) {
        return Err(Error::UnattainableConstraint(b.as_f64()));
    }
    let denom = c * a - b * b;
    if denom.abs() <= T::lit(1e-12) * (c * a).abs() {
        return Err(Error::DegenerateMeans(denom.as_f64()));
    }
    let a1 = (mu * b * a - b * b) / denom;
    let w_gmv = theta_iota / a;
    let w_m = theta_m / b;
    let mut w = w_gmv * (T::one() - a1) + w_m * a1;
    let s = w.sum();
    w /= s;
    let mut out = WeightVector::new(w, Formulation::Mwc);
    out.target_mu = Some(mu);
    Ok(out)
}

/// Risk-constrained mean-variance: `sigma / sqrt(m' Theta m) * Theta m`.
pub fn mrc<T: Scalar>(theta: &DMatrix<T>, m: &DVector<T>, sigma: T) -> Result<WeightVector<T>> {
    check_square(theta, Some(m))?;
    let alpha = theta * m;
    let th = m.dot(&alpha);
    if !(th > T::lit(1e-14)) {
        return Err(Error::ZeroSharpe(th.as_f64()));
    }
    let mut out = WeightVector::new(alpha * (sigma / th.sqrt()), Formulation::Mrc);
    out.target_sigma = Some(sigma);
    Ok(out)
}

/// Target supplied to the MRC regression.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Target<T> {
    Mu(T),
    Sigma(T),
}

impl<T: Scalar> Target<T> {
    /// The risk form wins when both are given.
    pub fn resolve(mu: Option<T>, sigma: Option<T>) -> Result<Self> {
        match (mu, sigma) {
            (_, Some(s)) => Ok(Target::Sigma(s)),
            (Some(m), None) => Ok(Target::Mu(m)),
            (None, None) => Err(Error::Config(
                "either a target return or a target risk is required".into(),
            )),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SharpeState<T> {
    /// `m' Theta m`, the squared Sharpe ratio.
    pub theta_hat: T,
    /// Constant regression target.
    pub y_hat: T,
    /// `Theta m`
    pub alpha_hat: DVector<T>,
}

/// `y = mu (1 + theta) / theta`, or `sigma (1 + theta) / sqrt(theta)` for a risk target.
pub fn sharpe_state<T: Scalar>(
    theta: &DMatrix<T>,
    m_hat: &DVector<T>,
    target: Target<T>,
) -> Result<SharpeState<T>> {
    check_square(theta, Some(m_hat))?;
    let alpha_hat = theta * m_hat;
    let theta_hat = m_hat.dot(&alpha_hat);
    if !(theta_hat > T::lit(1e-14)) {
        return Err(Error::ZeroSharpe(theta_hat.as_f64()));
    }
    let one_plus = T::one() + theta_hat;
    let y_hat = match target {
        Target::Mu(mu) => mu * one_plus / theta_hat,
        Target::Sigma(sigma) => sigma * one_plus / theta_hat.sqrt(),
    };
    Ok(SharpeState {
        theta_hat,
        y_hat,
        alpha_hat,
    })
}

fn design_and_response<T: Scalar>(
    panel: &DMatrix<T>,
    y_hat: T,
) -> Result<(DMatrix<T>, DVector<T>)> {
    if !y_hat.finite() {
        return Err(Error::Config(format!(
            "regression target must be finite, got {y_hat}"
        )));
    }
    let x = panel.transpose();
    let y = DVector::from_element(x.nrows(), y_hat);
    Ok((x, y))
}

fn lasso_weights<T: Scalar>(fit: LassoFit<T>) -> WeightVector<T> {
    let mut out = WeightVector::new(fit.coefficients, Formulation::MrcLasso);
    out.support = fit.support;
    out.lambda = Some(fit.lambda);
    out
}

/// Sparse MRC weights: Lasso of the constant `y_hat` on the returns.
pub fn mrc_lasso<T: Scalar>(
    panel: &DMatrix<T>,
    y_hat: T,
    lambda: T,
    opts: &LassoOptions<T>,
) -> Result<WeightVector<T>> {
    let (x, y) = design_and_response(panel, y_hat)?;
    Ok(lasso_weights(lasso_fit(&x, &y, lambda, opts)?))
}

/// `||R' y_hat iota / T||_inf`, the penalty above which every weight is zero.
pub fn mrc_lambda_max<T: Scalar>(panel: &DMatrix<T>, y_hat: T) -> T {
    row_means(panel)
        .iter()
        .fold(T::zero(), |a, v| a.max(v.abs()))
        * y_hat.abs()
}

/// Sparse MRC weights with the penalty chosen by GIC on the default path.
/// Models larger than half the sample are not candidates.
pub fn mrc_lasso_gic<T: Scalar>(
    panel: &DMatrix<T>,
    y_hat: T,
    opts: &LassoOptions<T>,
) -> Result<WeightVector<T>> {
    let (x, y) = design_and_response(panel, y_hat)?;
    let grid = default_grid(mrc_lambda_max(panel, y_hat));
    let limits = PathLimits {
        max_support: Some((x.nrows() / 2).max(1)),
        patience: None,
    };
    let (_, fit) = select_lambda_gic_limited(&x, &y, &grid, opts, limits)?;
    Ok(lasso_weights(fit))
}

#[derive(Debug, Clone)]
pub struct DebiasDiagnostics<T> {
    /// Subgradient of `||w||_1` at the Lasso solution.
    pub g_hat: DVector<T>,
    /// `Theta Sigma Theta'` with `Sigma = R'R/T`.
    pub omega_hat: DMatrix<T>,
    pub sigma_e_sq_hat: T,
    /// `||sqrt(T) (Theta Sigma - I)(w_lasso - w_debiased)||_inf`, a plug-in for the remainder.
    pub delta_inf: T,
    /// `sqrt(sigma_e^2 Omega_jj / T)`
    pub standard_errors: DVector<T>,
}

/// `Theta - Theta m m' Theta / (1 + m' Theta m)`: the inverse of `Sigma + m m'`
/// given `Theta = Sigma^-1`. The de-biasing step works with the uncentered
/// second moment `R'R/T`, so a covariance-based precision is converted first.
pub fn second_moment_precision<T: Scalar>(
    theta: &DMatrix<T>,
    m: &DVector<T>,
) -> Result<DMatrix<T>> {
    check_square(theta, Some(m))?;
    let tm = theta * m;
    let denom = T::one() + m.dot(&tm);
    Ok(theta - (&tm * tm.transpose()) / denom)
}

/// `||sqrt(T) (Theta R'R/T - I)(w_hat - w_ref)||_inf`
pub fn debias_remainder<T: Scalar>(
    theta: &DMatrix<T>,
    panel: &DMatrix<T>,
    w_hat: &DVector<T>,
    w_ref: &DVector<T>,
) -> T {
    let n = T::from_count(panel.ncols());
    let diff = w_hat - w_ref;
    let sigma_diff = panel * (panel.transpose() * &diff) / n;
    let v = (theta * sigma_diff - &diff) * n.sqrt();
    v.iter().fold(T::zero(), |a, x| a.max(x.abs()))
}

/// One-step correction `w + Theta R'(y - R w)/T` of Lasso weights.
///
/// `theta` should approximate the inverse of `R'R/T`; see
/// [`second_moment_precision`].
pub fn debias<T: Scalar>(
    w_lasso: &WeightVector<T>,
    theta: &DMatrix<T>,
    panel: &DMatrix<T>,
    y_hat: T,
) -> Result<(WeightVector<T>, DebiasDiagnostics<T>)> {
    let (p, t) = panel.shape();
    if w_lasso.len() != p || theta.shape() != (p, p) {
        return Err(Error::DimensionMismatch(format!(
            "weights {}, precision {:?}, panel {:?}",
            w_lasso.len(),
            theta.shape(),
            panel.shape()
        )));
    }
    let n = T::from_count(t);
    let w = &w_lasso.weights;
    let resid = DVector::from_element(t, y_hat) - panel.transpose() * w;
    let corr = panel * &resid / n;
    let w_deb = w + theta * &corr;

    let lambda = w_lasso.lambda.unwrap_or_else(T::zero);
    let g_hat = DVector::from_fn(p, |j, _| {
        if w[j] > T::zero() {
            T::one()
        } else if w[j] < T::zero() {
            -T::one()
        } else if lambda > T::zero() {
            (corr[j] / lambda).max(-T::one()).min(T::one())
        } else {
            T::zero()
        }
    });
    let sigma_hat = panel * panel.transpose() / n;
    let omega_hat = crate::linalg::symmetrized(&(theta * &sigma_hat * theta.transpose()));
    let dof = t.saturating_sub(w_lasso.support.len()).max(1);
    let sigma_e_sq_hat = (resid.dot(&resid) / T::from_count(dof)).max(T::lit(1e-12));
    let delta_inf = debias_remainder(theta, panel, w, &w_deb);
    let standard_errors = DVector::from_fn(p, |j, _| {
        (sigma_e_sq_hat * omega_hat[(j, j)].max(T::zero()) / n).sqrt()
    });

    let mut out = WeightVector::new(w_deb, Formulation::MrcDebiased);
    out.lambda = w_lasso.lambda;
    out.target_mu = w_lasso.target_mu;
    out.target_sigma = w_lasso.target_sigma;
    Ok((
        out,
        DebiasDiagnostics {
            g_hat,
            omega_hat,
            sigma_e_sq_hat,
            delta_inf,
            standard_errors,
        },
    ))
}

/// Settings for the second step of the post-Lasso procedure.
#[derive(Debug, Clone)]
pub struct PostLassoConfig<T> {
    /// Weights with `|w| <= threshold` are dropped.
    pub threshold: T,
    pub inner: InnerFormulation,
    pub mu: Option<T>,
    pub sigma: Option<T>,
    /// Below this many selected assets the sample-covariance inverse is used;
    /// `None` means `min(T/2, 30)`.
    pub fallback_size: Option<usize>,
    pub factors: FactorCount,
    pub nodewise: NodewiseOptions<T>,
}

impl<T: Scalar> Default for PostLassoConfig<T> {
    fn default() -> Self {
        Self {
            threshold: T::lit(1e-4),
            inner: InnerFormulation::Mrc,
            mu: None,
            sigma: Some(T::lit(0.05)),
            fallback_size: None,
            factors: FactorCount::Fixed(3),
            nodewise: NodewiseOptions::default(),
        }
    }
}

impl<T> PostLassoConfig<T> {
    pub fn fallback_for(&self, t: usize) -> usize {
        self.fallback_size.unwrap_or((t / 2).min(30))
    }
}

/// Full post-Lasso: Lasso selection at `lambda`, thresholding, then the inner
/// formulation on the selected assets.
pub fn post_lasso<T: Scalar>(
    panel: &DMatrix<T>,
    y_hat: T,
    lambda: T,
    cfg: &PostLassoConfig<T>,
    opts: &LassoOptions<T>,
) -> Result<WeightVector<T>> {
    let first = mrc_lasso(panel, y_hat, lambda, opts)?;
    let mut out = post_lasso_from_weights(panel, &first.weights, cfg)?;
    out.lambda = Some(lambda);
    Ok(out)
}

/// Second step of post-Lasso given first-stage weights.
pub fn post_lasso_from_weights<T: Scalar>(
    panel: &DMatrix<T>,
    first_stage: &DVector<T>,
    cfg: &PostLassoConfig<T>,
) -> Result<WeightVector<T>> {
    if !(cfg.threshold >= T::zero()) {
        return Err(Error::Config("post-Lasso threshold must be >= 0".into()));
    }
    let selected: Vec<usize> = first_stage
        .iter()
        .enumerate()
        .filter(|(_, w)| w.abs() > cfg.threshold)
        .map(|(i, _)| i)
        .collect();
    if selected.is_empty() {
        return Err(Error::EmptySupport(format!(
            "no first-stage weight exceeds the threshold {}; use a smaller lambda or threshold",
            cfg.threshold
        )));
    }
    post_lasso_on_support(panel, &selected, cfg)
}

/// Inner formulation on a given set of assets, embedded back into `p` slots.
pub fn post_lasso_on_support<T: Scalar>(
    panel: &DMatrix<T>,
    selected: &[usize],
    cfg: &PostLassoConfig<T>,
) -> Result<WeightVector<T>> {
    let (p, t) = panel.shape();
    if selected.is_empty() {
        return Err(Error::EmptySupport("selected asset set is empty".into()));
    }
    if selected.iter().any(|&i| i >= p) {
        return Err(Error::DimensionMismatch(
            "selected index out of range".into(),
        ));
    }
    let sub = panel.select_rows(selected);
    let precision = if selected.len() < cfg.fallback_for(t) {
        sample_inverse(&sub)?
    } else {
        fmb(&sub, &cfg.factors, &cfg.nodewise)?
    };
    let m_sub = row_means(&sub);
    let inner = match cfg.inner {
        InnerFormulation::Gmv => gmv(&precision.theta)?,
        InnerFormulation::Mwc => {
            let mu = cfg
                .mu
                .ok_or_else(|| Error::Config("post-Lasso with MWC needs a target return".into()))?;
            mwc(&precision.theta, &m_sub, mu)?
        }
        InnerFormulation::Mrc => {
            let sigma = cfg
                .sigma
                .ok_or_else(|| Error::Config("post-Lasso with MRC needs a target risk".into()))?;
            mrc(&precision.theta, &m_sub, sigma)?
        }
    };
    let mut full = DVector::zeros(p);
    for (slot, &i) in selected.iter().enumerate() {
        full[i] = inner.weights[slot];
    }
    let mut out = WeightVector::new(full, Formulation::PostLasso(cfg.inner));
    out.target_mu = inner.target_mu;
    out.target_sigma = inner.target_sigma;
    Ok(out)
}

/// Splits weights over `(factors, assets)` into the leading `k1` factor
/// weights and the asset weights.
pub fn split_factor_weights<T: Scalar>(
    w_all: &DVector<T>,
    k1: usize,
) -> Result<(DVector<T>, DVector<T>)> {
    if k1 >= w_all.len() && !(k1 == 0 && w_all.is_empty()) {
        return Err(Error::DimensionMismatch(format!(
            "cannot split {k1} factor weights from a vector of length {}",
            w_all.len()
        )));
    }
    let w_f = w_all.rows(0, k1).into_owned();
    let w_assets = w_all.rows(k1, w_all.len() - k1).into_owned();
    Ok((w_f, w_assets))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn gmv_identity_and_diag() {
        let w = gmv(&DMatrix::<f64>::identity(4, 4)).unwrap();
        for v in w.weights.iter() {
            assert_relative_eq!(*v, 0.25, epsilon = 1e-15);
        }
        let theta = DMatrix::from_diagonal(&DVector::from_vec(vec![2.0, 1.0]));
        let w = gmv(&theta).unwrap();
        assert_relative_eq!(w.weights[0], 2.0 / 3.0, epsilon = 1e-15);
        assert_relative_eq!(w.weights[1], 1.0 / 3.0, epsilon = 1e-15);
        let scaled = gmv(&(theta * 7.5)).unwrap();
        assert_relative_eq!(scaled.weights, w.weights, epsilon = 1e-15);
    }

    #[test]
    fn gmv_rejects_non_positive() {
        let theta = DMatrix::from_row_slice(2, 2, &[-1.0, 0.0, 0.0, -1.0]);
        assert!(matches!(gmv(&theta), Err(Error::NotPositiveDefinite(_))));
    }

    #[test]
    fn mwc_cases() {
        let theta = DMatrix::<f64>::identity(2, 2);
        let m = DVector::from_vec(vec![1.0, 0.0]);
        let w = mwc(&theta, &m, 0.75).unwrap();
        assert_relative_eq!(w.weights[0], 0.75, epsilon = 1e-15);
        assert_relative_eq!(w.weights[1], 0.25, epsilon = 1e-15);

        // mu at the GMV expected return gives the GMV portfolio
        let theta = DMatrix::from_row_slice(3, 3, &[2.0, 0.3, 0.0, 0.3, 1.0, 0.1, 0.0, 0.1, 1.5]);
        let m = DVector::from_vec(vec![0.01, 0.02, 0.015]);
        let g = gmv(&theta).unwrap();
        let mu_gmv = g.weights.dot(&m);
        let w = mwc(&theta, &m, mu_gmv).unwrap();
        assert_relative_eq!(w.weights, g.weights, epsilon = 1e-12);

        let flat = DVector::from_element(3, 0.01);
        assert!(matches!(
            mwc(&theta, &flat, 0.02),
            Err(Error::DegenerateMeans(_))
        ));
        let neg = DVector::from_element(3, -0.01);
        assert!(matches!(
            mwc(&theta, &neg, 0.02),
            Err(Error::UnattainableConstraint(_))
        ));
    }

    #[test]
    fn mrc_cases() {
        let theta = DMatrix::<f64>::identity(2, 2);
        let m = DVector::from_vec(vec![1.0, 0.0]);
        let w = mrc(&theta, &m, 0.05).unwrap();
        assert_relative_eq!(w.weights[0], 0.05, epsilon = 1e-15);
        assert_eq!(w.weights[1], 0.0);
        assert_relative_eq!(w.weights.dot(&w.weights), 0.0025, epsilon = 1e-15);
        let w2 = mrc(&theta, &m, 0.10).unwrap();
        assert_relative_eq!(w2.weights, &w.weights * 2.0, epsilon = 1e-15);
        let w3 = mrc(&theta, &(&m * 3.0), 0.05).unwrap();
        assert_relative_eq!(w3.weights, w.weights, epsilon = 1e-15);
        assert!(matches!(
            mrc(&theta, &DVector::zeros(2), 0.05),
            Err(Error::ZeroSharpe(_))
        ));
    }

    #[test]
    fn sharpe_state_forms() {
        let theta = DMatrix::<f64>::identity(2, 2);
        let m = DVector::from_vec(vec![1.0, 0.0]);
        let s = sharpe_state(&theta, &m, Target::Sigma(0.05)).unwrap();
        assert_relative_eq!(s.theta_hat, 1.0);
        assert_relative_eq!(s.y_hat, 0.1, epsilon = 1e-15);
        let s = sharpe_state(&theta, &m, Target::Mu(0.05)).unwrap();
        assert_relative_eq!(s.y_hat, 0.1, epsilon = 1e-15);
        // large theta: y -> sigma sqrt(theta)
        let big = DMatrix::from_diagonal(&DVector::from_vec(vec![1e4, 1.0]));
        let s = sharpe_state(&big, &m, Target::Sigma(0.05)).unwrap();
        assert_relative_eq!(s.theta_hat, 1e4);
        assert!((s.y_hat - 5.0).abs() / 5.0 < 1e-4);
        assert_eq!(
            Target::resolve(Some(0.01), Some(0.05)).unwrap(),
            Target::Sigma(0.05)
        );
        assert!(Target::<f64>::resolve(None, None).is_err());
    }

    #[test]
    fn split_weights() {
        let w = DVector::from_vec(vec![0.3, 0.7]);
        let (f, a) = split_factor_weights(&w, 1).unwrap();
        assert_eq!(f.as_slice(), &[0.3]);
        assert_eq!(a.as_slice(), &[0.7]);
        let (f, a) = split_factor_weights(&w, 0).unwrap();
        assert!(f.is_empty());
        assert_eq!(a, w);
        let mut joined: Vec<f64> = f.iter().copied().collect();
        joined.extend(a.iter());
        assert_eq!(joined, vec![0.3, 0.7]);
        assert!(split_factor_weights(&w, 2).is_err());
    }

    #[test]
    fn post_lasso_on_orthogonal_pair() {
        // assets 0 and 1 have identical variance and zero sample covariance
        let panel = DMatrix::from_row_slice(
            3,
            4,
            &[
                1.0, -1.0, 1.0, -1.0, 1.0, 1.0, -1.0, -1.0, 0.3, 0.1, -0.2, 0.5,
            ],
        );
        let cfg = PostLassoConfig {
            inner: InnerFormulation::Gmv,
            fallback_size: Some(30),
            ..PostLassoConfig::default()
        };
        let w = post_lasso_on_support(&panel, &[0, 1], &cfg).unwrap();
        assert_relative_eq!(w.weights[0], 0.5, epsilon = 1e-14);
        assert_relative_eq!(w.weights[1], 0.5, epsilon = 1e-14);
        assert_eq!(w.weights[2], 0.0);
        assert_eq!(w.support, vec![0, 1]);
    }

    #[test]
    fn post_lasso_threshold_above_all_weights_is_empty() {
        let panel = DMatrix::from_row_slice(2, 3, &[0.1, 0.2, 0.3, 0.0, 0.1, -0.1]);
        let cfg = PostLassoConfig {
            threshold: 1.0,
            ..PostLassoConfig::default()
        };
        let first = DVector::from_vec(vec![0.5, -0.2]);
        assert!(matches!(
            post_lasso_from_weights(&panel, &first, &cfg),
            Err(Error::EmptySupport(_))
        ));
    }

    #[test]
    fn zero_residual_means_no_correction() {
        let panel = DMatrix::from_row_slice(2, 3, &[1.0, 1.0, 1.0, 0.5, -0.5, 0.0]);
        // w = (2, 0) reproduces y = 2 exactly
        let mut w = WeightVector::new(DVector::from_vec(vec![2.0, 0.0]), Formulation::MrcLasso);
        w.lambda = Some(0.1);
        let theta = DMatrix::from_row_slice(2, 2, &[3.0, 0.2, 0.2, 5.0]);
        let (deb, diag) = debias(&w, &theta, &panel, 2.0).unwrap();
        assert_relative_eq!(deb.weights, w.weights, epsilon = 1e-15);
        assert_eq!(diag.g_hat[0], 1.0);
        assert!(diag.g_hat.iter().all(|g: &f64| g.abs() <= 1.0));
    }
}
