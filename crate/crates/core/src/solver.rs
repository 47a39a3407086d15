//! Lasso by cyclic coordinate descent, plus GIC-based selection of the
//! penalty along a geometric path.
//!
//! Every fit minimizes
//!
//! ```text
//! (1/T) ||y - X b||^2 + 2 * lambda * ||b||_1
//! ```
//!
//! with no intercept and no column standardization: callers pass raw
//! (possibly demeaned) columns and the penalty acts on that scale. The
//! coordinate update for this convention is `b_k = S(z_k, lambda) / G_kk`
//! where `G = X'X/T` and `z_k` is the partial-residual correlation.
//!
//! Internally the solver works on the Gram form `(G, X'y/T, y'y/T)` and keeps
//! the gradient `X'(y - Xb)/T` up to date, so a sweep costs `O(q)` plus `O(q)`
//! per coordinate that actually moves. Nodewise regression reuses one panel
//! Gram matrix for all `p` regressions through [`GramProblem`].

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy)]
pub struct LassoOptions<T> {
    /// Convergence threshold on the largest coordinate change in a sweep.
    pub tol: T,
    /// Maximum number of full sweeps.
    pub max_iter: usize,
    /// Record the objective after every sweep in [`LassoFit::objective_trace`].
    pub track_objective: bool,
}

impl<T: Scalar> Default for LassoOptions<T> {
    fn default() -> Self {
        Self {
            tol: T::lit(1e-7),
            max_iter: 10_000,
            track_objective: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LassoFit<T> {
    pub coefficients: DVector<T>,
    pub lambda: T,
    /// `(1/T)||y - Xb||^2 + 2 lambda ||b||_1`
    pub objective: T,
    /// Indices of the nonzero coefficients, ascending.
    pub support: Vec<usize>,
    pub residual_ss: T,
    pub sweeps: usize,
    /// Objective after each sweep; empty unless requested.
    pub objective_trace: Vec<T>,
}

impl<T: Scalar> LassoFit<T> {
    pub fn support_size(&self) -> usize {
        self.support.len()
    }
}

/// `sign(z) * max(|z| - lambda, 0)`
#[inline]
pub fn soft_threshold<T: Scalar>(z: T, lambda: T) -> T {
    if z > lambda {
        z - lambda
    } else if z < -lambda {
        z + lambda
    } else {
        T::zero()
    }
}

/// `||X'y / T||_inf`, the smallest penalty giving an all-zero fit.
pub fn lambda_max<T: Scalar>(x: &DMatrix<T>, y: &DVector<T>) -> T {
    let n = T::from_count(x.nrows());
    let xty = x.tr_mul(y);
    xty.iter().fold(T::zero(), |acc, v| acc.max(v.abs())) / n
}

/// Geometric grid of `points` values from `lambda_max` down to `min_ratio * lambda_max`.
pub fn lambda_grid<T: Scalar>(lambda_max: T, points: usize, min_ratio: T) -> Vec<T> {
    if points == 0 {
        return Vec::new();
    }
    if lambda_max <= T::zero() {
        return vec![T::zero()];
    }
    if points == 1 {
        return vec![lambda_max];
    }
    let lmax = lambda_max.as_f64();
    let log_ratio = min_ratio.as_f64().ln();
    (0..points)
        .map(|i| {
            let frac = i as f64 / (points - 1) as f64;
            T::lit(lmax * (log_ratio * frac).exp())
        })
        .collect()
}

/// Default path used by nodewise regressions and the weight Lasso.
pub fn default_grid<T: Scalar>(lambda_max: T) -> Vec<T> {
    lambda_grid(lambda_max, 100, T::lit(1e-3))
}

/// Generalized information criterion
/// `log(rss / T) + |S| * (log p / T) * log(log T)`.
///
/// A perfect fit (`rss == 0`) yields negative infinity.
pub fn gic<T: Scalar>(residual_ss: T, support_size: usize, t: usize, p: usize) -> T {
    let n = T::from_count(t);
    let penalty = T::from_count(support_size) * (T::from_count(p).ln() / n) * n.ln().ln();
    if residual_ss <= T::zero() {
        log::warn!("GIC evaluated on a perfect fit (zero residual sum of squares)");
        return T::lit(f64::NEG_INFINITY);
    }
    (residual_ss / n).ln() + penalty
}

/// Largest violation of the Lasso optimality conditions, recomputed from the data.
///
/// On the support the stationarity residual `|x_j'(y - Xb)/T - lambda sign(b_j)|`
/// is measured; off the support the excess `max(0, |x_j'(y - Xb)|/T - lambda)`.
pub fn kkt_check<T: Scalar>(fit: &LassoFit<T>, x: &DMatrix<T>, y: &DVector<T>) -> T {
    let n = T::from_count(x.nrows());
    let resid = y - x * &fit.coefficients;
    let grad = x.tr_mul(&resid) / n;
    kkt_violation(&fit.coefficients, &grad, fit.lambda)
}

fn sign_of<T: Scalar>(v: T) -> T {
    if v > T::zero() {
        T::one()
    } else if v < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

fn kkt_violation<T: Scalar>(beta: &DVector<T>, grad: &DVector<T>, lambda: T) -> T {
    beta.iter()
        .zip(grad.iter())
        .fold(T::zero(), |worst, (&b, &g)| {
            let v = if b > T::zero() {
                (g - lambda).abs()
            } else if b < T::zero() {
                (g + lambda).abs()
            } else {
                (g.abs() - lambda).max(T::zero())
            };
            worst.max(v)
        })
}

/// Quadratic data of a Lasso problem in Gram form.
#[derive(Debug, Clone)]
pub struct GramProblem<T> {
    /// `X'X / T`
    pub gram: DMatrix<T>,
    /// `X'y / T`
    pub xty: DVector<T>,
    /// `y'y / T`
    pub yy: T,
    /// Number of observations.
    pub n_obs: usize,
}

/// Coefficients and maintained gradient `X'(y - Xb)/T`; carried along a path for warm starts.
#[derive(Debug, Clone)]
pub struct PathState<T> {
    pub beta: DVector<T>,
    pub grad: DVector<T>,
}

impl<T: Scalar> GramProblem<T> {
    pub fn from_design(x: &DMatrix<T>, y: &DVector<T>) -> Self {
        let n = T::from_count(x.nrows());
        Self {
            gram: x.tr_mul(x) / n,
            xty: x.tr_mul(y) / n,
            yy: y.dot(y) / n,
            n_obs: x.nrows(),
        }
    }

    pub fn dim(&self) -> usize {
        self.xty.len()
    }

    pub fn lambda_max(&self) -> T {
        self.xty.iter().fold(T::zero(), |acc, v| acc.max(v.abs()))
    }

    pub fn cold_state(&self) -> PathState<T> {
        PathState {
            beta: DVector::zeros(self.dim()),
            grad: self.xty.clone(),
        }
    }

    /// `(1/T)||y - Xb||^2` from the Gram form, clamped at zero.
    pub fn rss_over_n(&self, state: &PathState<T>) -> T {
        let v = self.yy - state.beta.dot(&self.xty) - state.beta.dot(&state.grad);
        v.max(T::zero())
    }

    pub fn objective(&self, state: &PathState<T>, lambda: T) -> T {
        let l1 = state.beta.iter().fold(T::zero(), |a, b| a + b.abs());
        self.rss_over_n(state) + T::lit(2.0) * lambda * l1
    }

    /// Runs coordinate descent from `state` until the largest coordinate
    /// change is below `tol` and the optimality conditions hold to `tol`.
    /// Returns the number of sweeps and, optionally, the per-sweep objective.
    pub fn solve(
        &self,
        lambda: T,
        state: &mut PathState<T>,
        opts: &LassoOptions<T>,
    ) -> Result<(usize, Vec<T>)> {
        let q = self.dim();
        let mut trace = Vec::new();
        let mut prev_obj = if opts.track_objective || cfg!(debug_assertions) {
            Some(self.objective(state, lambda))
        } else {
            None
        };
        let mut max_change = T::zero();
        let mut stable_sweeps = 0usize;
        let mut polished = false;
        for sweep in 1..=opts.max_iter {
            max_change = T::zero();
            let mut pattern_changed = false;
            for k in 0..q {
                let gkk = self.gram[(k, k)];
                if gkk <= T::zero() {
                    continue;
                }
                let old = state.beta[k];
                let z = state.grad[k] + gkk * old;
                let new = soft_threshold(z, lambda) / gkk;
                let delta = new - old;
                if delta != T::zero() {
                    if sign_of(new) != sign_of(old) {
                        pattern_changed = true;
                    }
                    state.beta[k] = new;
                    state.grad.axpy(-delta, &self.gram.column(k), T::one());
                    max_change = max_change.max(delta.abs());
                }
            }
            if pattern_changed {
                stable_sweeps = 0;
                polished = false;
            } else {
                stable_sweeps += 1;
            }
            // Once the active set and signs settle, jump to the exact minimizer on them.
            if !polished && stable_sweeps >= 2 {
                polished = true;
                self.polish(lambda, state);
            }
            if let Some(prev) = prev_obj {
                let obj = self.objective(state, lambda);
                let slack =
                    T::lit(1e-10).max(T::machine_eps() * T::lit(64.0)) * (T::one() + prev.abs());
                debug_assert!(
                    obj <= prev + slack,
                    "lasso objective increased across a sweep: {prev} -> {obj}"
                );
                if opts.track_objective {
                    trace.push(obj);
                }
                prev_obj = Some(obj);
            }
            if max_change < opts.tol && kkt_violation(&state.beta, &state.grad, lambda) <= opts.tol
            {
                return Ok((sweep, trace));
            }
            if polished && kkt_violation(&state.beta, &state.grad, lambda) <= opts.tol {
                return Ok((sweep, trace));
            }
        }
        Err(Error::NonConvergence {
            iterations: opts.max_iter,
            max_change: max_change.as_f64(),
            last_iterate: state.beta.iter().map(|v| v.as_f64()).collect(),
        })
    }

    /// Replaces `beta` by the exact minimizer over its current support with
    /// its current signs, when that solution keeps every sign and does not
    /// raise the objective. Returns whether the step was taken.
    fn polish(&self, lambda: T, state: &mut PathState<T>) -> bool {
        let support = support_of(&state.beta);
        if support.is_empty() {
            return false;
        }
        let s = support.len();
        let g = DMatrix::from_fn(s, s, |a, b| self.gram[(support[a], support[b])]);
        let signs: Vec<T> = support.iter().map(|&k| sign_of(state.beta[k])).collect();
        let rhs = DVector::from_fn(s, |a, _| self.xty[support[a]] - lambda * signs[a]);
        let Some(chol) = g.cholesky() else {
            return false;
        };
        let sol = chol.solve(&rhs);
        if sol
            .iter()
            .zip(&signs)
            .any(|(v, sg)| !v.finite() || *v * *sg <= T::zero())
        {
            return false;
        }
        let mut candidate = PathState {
            beta: DVector::zeros(self.dim()),
            grad: self.xty.clone(),
        };
        for (a, &k) in support.iter().enumerate() {
            candidate.beta[k] = sol[a];
            candidate.grad.axpy(-sol[a], &self.gram.column(k), T::one());
        }
        if self.objective(&candidate, lambda) > self.objective(state, lambda) {
            return false;
        }
        *state = candidate;
        true
    }
}

/// Support of a coefficient vector.
pub fn support_of<T: Scalar>(beta: &DVector<T>) -> Vec<usize> {
    beta.iter()
        .enumerate()
        .filter(|(_, v)| **v != T::zero())
        .map(|(i, _)| i)
        .collect()
}

fn validate_design<T: Scalar>(x: &DMatrix<T>, y: &DVector<T>, lambda: T) -> Result<()> {
    if x.ncols() == 0 {
        return Err(Error::Validation("design matrix has no columns".into()));
    }
    if x.nrows() < 2 {
        return Err(Error::Validation(
            "lasso needs at least two observations".into(),
        ));
    }
    if x.nrows() != y.len() {
        return Err(Error::DimensionMismatch(format!(
            "design has {} rows but response has {} entries",
            x.nrows(),
            y.len()
        )));
    }
    if !(lambda >= T::zero()) || !lambda.finite() {
        return Err(Error::Config(format!(
            "lambda must be finite and >= 0, got {lambda}"
        )));
    }
    for (j, col) in x.column_iter().enumerate() {
        if col.iter().all(|v| *v == T::zero()) {
            return Err(Error::Validation(format!(
                "design column {j} is identically zero"
            )));
        }
    }
    Ok(())
}

fn finish_fit<T: Scalar>(
    x: &DMatrix<T>,
    y: &DVector<T>,
    lambda: T,
    beta: DVector<T>,
    sweeps: usize,
    objective_trace: Vec<T>,
) -> LassoFit<T> {
    let n = T::from_count(x.nrows());
    let resid = y - x * &beta;
    let residual_ss = resid.dot(&resid);
    let l1 = beta.iter().fold(T::zero(), |a, b| a + b.abs());
    LassoFit {
        support: support_of(&beta),
        objective: residual_ss / n + T::lit(2.0) * lambda * l1,
        coefficients: beta,
        lambda,
        residual_ss,
        sweeps,
        objective_trace,
    }
}

/// Single Lasso fit from a zero start.
pub fn lasso_fit<T: Scalar>(
    x: &DMatrix<T>,
    y: &DVector<T>,
    lambda: T,
    opts: &LassoOptions<T>,
) -> Result<LassoFit<T>> {
    validate_design(x, y, lambda)?;
    let problem = GramProblem::from_design(x, y);
    let mut state = problem.cold_state();
    let (sweeps, trace) = problem.solve(lambda, &mut state, opts)?;
    Ok(finish_fit(x, y, lambda, state.beta, sweeps, trace))
}

/// Fits every grid point in order, warm-starting each from the previous solution.
pub fn lasso_path<T: Scalar>(
    x: &DMatrix<T>,
    y: &DVector<T>,
    grid: &[T],
    opts: &LassoOptions<T>,
) -> Result<Vec<LassoFit<T>>> {
    for &l in grid {
        validate_design(x, y, l)?;
    }
    let problem = GramProblem::from_design(x, y);
    let mut state = problem.cold_state();
    let mut fits = Vec::with_capacity(grid.len());
    for &lambda in grid {
        let (sweeps, trace) = problem.solve(lambda, &mut state, opts)?;
        fits.push(finish_fit(x, y, lambda, state.beta.clone(), sweeps, trace));
    }
    Ok(fits)
}

/// Restrictions applied while walking a GIC path.
#[derive(Debug, Clone, Copy, Default)]
pub struct PathLimits {
    /// Stop the path once the support exceeds this size; larger models are not candidates.
    pub max_support: Option<usize>,
    /// Stop after this many consecutive grid points without a GIC improvement.
    pub patience: Option<usize>,
}

/// Outcome of a GIC search on a Gram problem.
#[derive(Debug, Clone)]
pub struct GicChoice<T> {
    pub index: usize,
    pub lambda: T,
    pub beta: DVector<T>,
    pub gic: T,
    /// Number of grid points actually fitted.
    pub evaluated: usize,
}

/// Walks `grid` (descending) with warm starts and keeps the GIC minimizer.
/// Ties go to the earlier, larger penalty. `p_for_penalty` is the dimension
/// entering the `log p` factor.
pub fn gic_search<T: Scalar>(
    problem: &GramProblem<T>,
    grid: &[T],
    p_for_penalty: usize,
    opts: &LassoOptions<T>,
    limits: PathLimits,
) -> Result<GicChoice<T>> {
    if grid.is_empty() {
        return Err(Error::Config("lambda grid is empty".into()));
    }
    if grid.windows(2).any(|w| w[1] > w[0]) {
        return Err(Error::Config(
            "lambda grid must be sorted in descending order".into(),
        ));
    }
    let n = problem.n_obs;
    let mut state = problem.cold_state();
    let mut best: Option<GicChoice<T>> = None;
    let mut evaluated = 0;
    let mut since_best = 0;
    for (index, &lambda) in grid.iter().enumerate() {
        problem.solve(lambda, &mut state, opts)?;
        evaluated += 1;
        let size = state.beta.iter().filter(|v| **v != T::zero()).count();
        if let Some(cap) = limits.max_support {
            if size > cap && best.is_some() {
                break;
            }
        }
        let rss = problem.rss_over_n(&state) * T::from_count(n);
        let value = gic(rss, size, n, p_for_penalty.max(2));
        let better = match &best {
            None => true,
            Some(b) => value < b.gic,
        };
        if !better {
            since_best += 1;
            if limits.patience.is_some_and(|n| since_best >= n) {
                break;
            }
        } else {
            since_best = 0;
            best = Some(GicChoice {
                index,
                lambda,
                beta: state.beta.clone(),
                gic: value,
                evaluated,
            });
        }
    }
    let mut choice = best.expect("grid is nonempty");
    choice.evaluated = evaluated;
    Ok(choice)
}

/// Picks the GIC-minimizing penalty on `grid` (sorted descending) and returns
/// it with its fit. The whole grid is evaluated; ties favour the larger penalty.
pub fn select_lambda_gic<T: Scalar>(
    x: &DMatrix<T>,
    y: &DVector<T>,
    grid: &[T],
    opts: &LassoOptions<T>,
) -> Result<(T, LassoFit<T>)> {
    select_lambda_gic_limited(x, y, grid, opts, PathLimits::default())
}

/// [`select_lambda_gic`] with a cap on candidate model size.
pub fn select_lambda_gic_limited<T: Scalar>(
    x: &DMatrix<T>,
    y: &DVector<T>,
    grid: &[T],
    opts: &LassoOptions<T>,
    limits: PathLimits,
) -> Result<(T, LassoFit<T>)> {
    for &l in grid {
        validate_design(x, y, l)?;
    }
    let problem = GramProblem::from_design(x, y);
    let choice = gic_search(&problem, grid, x.ncols(), opts, limits)?;
    let fit = finish_fit(x, y, choice.lambda, choice.beta, 0, Vec::new());
    Ok((choice.lambda, fit))
}
