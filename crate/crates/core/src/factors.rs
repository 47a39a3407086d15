//! Approximate factor structure of a `p x T` return panel.
//!
//! PCA estimates solve `min ||R - B F||_F^2` subject to `F F'/T = I_K` and
//! `B'B` diagonal, giving `F = sqrt(T) * eig_K(R'R)'` and `B = R F'/T`. Each
//! asset's sample mean is removed before the decomposition. The stored
//! residuals are `R - B F` on the raw panel, so they carry the asset means
//! back and `B F + E` reproduces the input exactly.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{demean_rows, inverse_spd, sym_eigen_desc, sym_eigenvalues_desc};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FactorMode {
    Pca,
    Observed,
}

#[derive(Debug, Clone)]
pub struct FactorDecomposition<T> {
    /// `K x T`
    pub factors: DMatrix<T>,
    /// `p x K`
    pub loadings: DMatrix<T>,
    /// `p x T`
    pub residuals: DMatrix<T>,
    pub k: usize,
    pub mode: FactorMode,
}

impl<T: Scalar> FactorDecomposition<T> {
    pub fn reconstruct(&self) -> DMatrix<T> {
        &self.loadings * &self.factors + &self.residuals
    }

    /// Centered `(1/T) F F'`; equals `I_K` up to rounding in PCA mode.
    pub fn factor_covariance(&self) -> DMatrix<T> {
        crate::linalg::sample_covariance(&self.factors)
    }
}

fn check_panel<T: Scalar>(panel: &DMatrix<T>) -> Result<()> {
    if panel.nrows() == 0 || panel.ncols() == 0 {
        return Err(Error::Validation("empty panel".into()));
    }
    if panel.iter().any(|v| !v.finite()) {
        return Err(Error::Validation("panel contains non-finite values".into()));
    }
    Ok(())
}

/// PCA factors, loadings and residuals with `k` factors.
pub fn estimate_pca<T: Scalar>(panel: &DMatrix<T>, k: usize) -> Result<FactorDecomposition<T>> {
    check_panel(panel)?;
    let (p, t) = panel.shape();
    if k == 0 {
        return Err(Error::Config(
            "PCA needs K >= 1; use observed mode with an empty factor set for K = 0".into(),
        ));
    }
    if k > p.min(t) {
        return Err(Error::Config(format!(
            "K = {k} exceeds min(p, T) = {}",
            p.min(t)
        )));
    }
    let (rc, _) = demean_rows(panel);
    let tn = T::from_count(t);
    let sqrt_t = tn.sqrt();

    let mut factors = DMatrix::zeros(k, t);
    let mut loadings = DMatrix::zeros(p, k);
    // Decompose the smaller of R'R (T x T) and RR' (p x p).
    if t <= p {
        let (vals, vecs) = sym_eigen_desc(&(rc.transpose() * &rc));
        check_rank(&vals, k)?;
        for j in 0..k {
            let v = vecs.column(j);
            factors.set_row(j, &(v.transpose() * sqrt_t));
            loadings.set_column(j, &(&rc * v / sqrt_t));
        }
    } else {
        let (vals, vecs) = sym_eigen_desc(&(&rc * rc.transpose()));
        check_rank(&vals, k)?;
        for j in 0..k {
            let u = vecs.column(j);
            let d = vals[j];
            let f = rc.transpose() * u * (sqrt_t / d.sqrt());
            factors.set_row(j, &f.transpose());
            loadings.set_column(j, &(u * (d / tn).sqrt()));
        }
    }

    // Largest-magnitude loading of each factor is positive.
    for j in 0..k {
        let col = loadings.column(j);
        let (imax, _) = col
            .iter()
            .enumerate()
            .fold((0, T::zero()), |(bi, bv), (i, v)| {
                if v.abs() > bv {
                    (i, v.abs())
                } else {
                    (bi, bv)
                }
            });
        if loadings[(imax, j)] < T::zero() {
            loadings.column_mut(j).neg_mut();
            factors.row_mut(j).neg_mut();
        }
    }

    let residuals = panel - &loadings * &factors;
    Ok(FactorDecomposition {
        factors,
        loadings,
        residuals,
        k,
        mode: FactorMode::Pca,
    })
}

fn check_rank<T: Scalar>(vals: &DVector<T>, k: usize) -> Result<()> {
    let top = vals[0];
    let floor = top * T::lit(1e-12);
    if top <= T::zero() || vals[k - 1] <= floor {
        return Err(Error::Config(format!(
            "K = {k} exceeds the numerical rank of the demeaned panel"
        )));
    }
    Ok(())
}

/// Bai-Ng `IC_p2` value for each `k` in `1..=k_max`.
pub fn ic_p2_curve<T: Scalar>(panel: &DMatrix<T>, k_max: usize) -> Result<Vec<T>> {
    check_panel(panel)?;
    let (p, t) = panel.shape();
    if k_max == 0 || 2 * k_max > p.min(t) {
        return Err(Error::Config(format!(
            "K_max = {k_max} must satisfy 1 <= K_max <= min(p, T)/2 = {}",
            p.min(t) / 2
        )));
    }
    let (rc, _) = demean_rows(panel);
    let gram = if t <= p {
        rc.transpose() * &rc
    } else {
        &rc * rc.transpose()
    };
    let vals = sym_eigenvalues_desc(&gram);
    let pt = T::from_count(p * t);
    let total = vals.iter().fold(T::zero(), |a, v| a + v.max(T::zero()));
    let floor = total * T::lit(1e-12) / pt;
    let penalty_unit = (T::from_count(p + t) / pt) * T::from_count(p.min(t)).ln();
    let mut explained = T::zero();
    let mut curve = Vec::with_capacity(k_max);
    for k in 1..=k_max {
        explained += vals[k - 1].max(T::zero());
        let v = ((total - explained) / pt).max(floor);
        curve.push(v.ln() + T::from_count(k) * penalty_unit);
    }
    Ok(curve)
}

/// Number of factors minimizing `IC_p2` over `1..=k_max`; ties go to the smaller `k`.
pub fn select_num_factors<T: Scalar>(panel: &DMatrix<T>, k_max: usize) -> Result<usize> {
    let curve = ic_p2_curve(panel, k_max)?;
    let mut best = 0;
    for (i, v) in curve.iter().enumerate() {
        if *v < curve[best] {
            best = i;
        }
    }
    Ok(best + 1)
}

/// Per-asset least squares of returns on observed factors, both demeaned.
/// `observed_factors` is `K x T`; `K = 0` gives residuals equal to the panel.
pub fn residualize_observed<T: Scalar>(
    panel: &DMatrix<T>,
    observed_factors: &DMatrix<T>,
) -> Result<FactorDecomposition<T>> {
    check_panel(panel)?;
    let (p, t) = panel.shape();
    let k = observed_factors.nrows();
    if k > 0 && observed_factors.ncols() != t {
        return Err(Error::DimensionMismatch(format!(
            "observed factors span {} periods, panel spans {t}",
            observed_factors.ncols()
        )));
    }
    if observed_factors.iter().any(|v| !v.finite()) {
        return Err(Error::Validation(
            "observed factors contain missing values".into(),
        ));
    }
    if k == 0 {
        return Ok(FactorDecomposition {
            factors: DMatrix::zeros(0, t),
            loadings: DMatrix::zeros(p, 0),
            residuals: panel.clone(),
            k: 0,
            mode: FactorMode::Observed,
        });
    }
    let tn = T::from_count(t);
    let (rc, _) = demean_rows(panel);
    let (fc, _) = demean_rows(observed_factors);
    let sff = (&fc * fc.transpose()) / tn;
    let sff_inv = inverse_spd(&sff, "observed factor covariance (rank-deficient factors)")?;
    let srf = (&rc * fc.transpose()) / tn;
    let loadings = srf * sff_inv;
    let residuals = panel - &loadings * observed_factors;
    Ok(FactorDecomposition {
        factors: observed_factors.clone(),
        loadings,
        residuals,
        k,
        mode: FactorMode::Observed,
    })
}
