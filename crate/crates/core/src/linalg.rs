//! Small dense helpers on top of nalgebra.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Eigen-decomposition of a symmetric matrix with eigenvalues sorted in
/// descending order; column `k` of the returned matrix pairs with value `k`.
pub fn sym_eigen_desc<T: Scalar>(m: &DMatrix<T>) -> (DVector<T>, DMatrix<T>) {
    let eig = SymmetricEigen::new(m.clone());
    let n = eig.eigenvalues.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .partial_cmp(&eig.eigenvalues[a])
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let values = DVector::from_iterator(n, order.iter().map(|&i| eig.eigenvalues[i]));
    let mut vectors = DMatrix::zeros(m.nrows(), n);
    for (dst, &src) in order.iter().enumerate() {
        vectors.set_column(dst, &eig.eigenvectors.column(src));
    }
    (values, vectors)
}

/// Eigenvalues only, descending.
pub fn sym_eigenvalues_desc<T: Scalar>(m: &DMatrix<T>) -> DVector<T> {
    let mut v: Vec<T> = m.clone().symmetric_eigenvalues().iter().copied().collect();
    v.sort_by(|a, b| b.partial_cmp(a).unwrap_or(std::cmp::Ordering::Equal));
    DVector::from_vec(v)
}

/// Ratio of extreme absolute eigenvalues of a symmetric matrix.
pub fn condition_estimate<T: Scalar>(m: &DMatrix<T>) -> f64 {
    let vals = m.clone().symmetric_eigenvalues();
    let (lo, hi) = vals.iter().fold((f64::INFINITY, 0.0f64), |(lo, hi), v| {
        let a = v.as_f64().abs();
        (lo.min(a), hi.max(a))
    });
    if lo == 0.0 {
        f64::INFINITY
    } else {
        hi / lo
    }
}

/// Inverse of a symmetric positive definite matrix via Cholesky, with an LU
/// fallback for indefinite but nonsingular input.
pub fn inverse_spd<T: Scalar>(m: &DMatrix<T>, context: &str) -> Result<DMatrix<T>> {
    if let Some(chol) = m.clone().cholesky() {
        let n = m.nrows();
        if let Some(l_inv) = chol.l().solve_lower_triangular(&DMatrix::identity(n, n)) {
            let inv = l_inv.transpose() * l_inv;
            if inv.iter().all(|v| v.finite()) {
                return Ok(symmetrized(&inv));
            }
        }
    }
    inverse_general(m, context)
}

/// Inverse of a general square matrix via LU.
pub fn inverse_general<T: Scalar>(m: &DMatrix<T>, context: &str) -> Result<DMatrix<T>> {
    let condition = condition_estimate(m);
    match m.clone().try_inverse() {
        Some(inv) if inv.iter().all(|v| v.finite()) && condition < 1e15 => Ok(inv),
        _ => Err(Error::Singular {
            context: context.to_string(),
            condition,
        }),
    }
}

/// `(A + A') / 2`
pub fn symmetrized<T: Scalar>(m: &DMatrix<T>) -> DMatrix<T> {
    (m + m.transpose()) * T::lit(0.5)
}

/// Row means of a `rows x cols` matrix.
pub fn row_means<T: Scalar>(m: &DMatrix<T>) -> DVector<T> {
    let n = T::from_count(m.ncols());
    DVector::from_iterator(m.nrows(), m.row_iter().map(|r| r.sum() / n))
}

/// Subtracts each row's mean.
pub fn demean_rows<T: Scalar>(m: &DMatrix<T>) -> (DMatrix<T>, DVector<T>) {
    let means = row_means(m);
    let mut out = m.clone();
    for (i, mut row) in out.row_iter_mut().enumerate() {
        row.add_scalar_mut(-means[i]);
    }
    (out, means)
}

/// Centered second moment `(1/T) Rc Rc'` of a `p x T` panel.
pub fn sample_covariance<T: Scalar>(panel: &DMatrix<T>) -> DMatrix<T> {
    let (rc, _) = demean_rows(panel);
    let n = T::from_count(panel.ncols());
    symmetrized(&((&rc * rc.transpose()) / n))
}

pub fn max_abs<T: Scalar>(m: &DMatrix<T>) -> T {
    m.iter().fold(T::zero(), |a, v| a.max(v.abs()))
}

pub fn max_abs_diff<T: Scalar>(a: &DMatrix<T>, b: &DMatrix<T>) -> T {
    max_abs(&(a - b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn eigen_sorted_descending_and_reconstructs() {
        let m = DMatrix::from_row_slice(3, 3, &[2.0, 0.5, 0.0, 0.5, 1.0, 0.3, 0.0, 0.3, 3.0]);
        let (vals, vecs) = sym_eigen_desc(&m);
        assert!(vals[0] >= vals[1] && vals[1] >= vals[2]);
        let back = &vecs * DMatrix::from_diagonal(&vals) * vecs.transpose();
        assert_relative_eq!(back, m, epsilon = 1e-12);
        let only = sym_eigenvalues_desc(&m);
        assert_relative_eq!(only, vals, epsilon = 1e-12);
    }

    #[test]
    fn spd_inverse_and_singular_detection() {
        let m = DMatrix::from_row_slice(2, 2, &[4.0, 1.0, 1.0, 3.0]);
        let inv = inverse_spd(&m, "test").unwrap();
        assert_relative_eq!(&m * &inv, DMatrix::identity(2, 2), epsilon = 1e-14);
        let s = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 4.0]);
        assert!(matches!(
            inverse_spd(&s, "test"),
            Err(Error::Singular { .. })
        ));
    }

    #[test]
    fn covariance_is_centered() {
        let panel = DMatrix::from_row_slice(2, 4, &[1.0, 2.0, 3.0, 4.0, 10.0, 10.0, 10.0, 10.0]);
        let c = sample_covariance(&panel);
        assert_relative_eq!(c[(0, 0)], 1.25, epsilon = 1e-15);
        assert_eq!(c[(1, 1)], 0.0);
    }
}
