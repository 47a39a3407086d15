//! Property tests over randomly generated inputs.

use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

use sparseport::backtest::{cer, perf_with_tc, DriftConvention};
use sparseport::data::{read_raw_panel, write_panel_csv, RawMode, ReturnsPanel};
use sparseport::linalg::sym_eigenvalues_desc;
use sparseport::precision::{eigenvalue_clean, sample_inverse, symmetrize};
use sparseport::solver::{lambda_grid, lasso_fit, lasso_path, LassoOptions};
use sparseport::weights::{gmv, mrc};

fn matrix(rows: usize, cols: usize, lo: f64, hi: f64) -> impl Strategy<Value = DMatrix<f64>> {
    prop::collection::vec(lo..hi, rows * cols).prop_map(move |v| DMatrix::from_vec(rows, cols, v))
}

/// `A A' + eps I`
fn spd(p: usize) -> impl Strategy<Value = DMatrix<f64>> {
    matrix(p, p + 2, -1.0, 1.0)
        .prop_map(move |a| &a * a.transpose() + DMatrix::identity(p, p) * 0.1)
}

fn sizes() -> impl Strategy<Value = (usize, usize)> {
    (2usize..6, 8usize..30)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn panel_csv_round_trip((p, t) in sizes(), seed in any::<u64>()) {
        let mut s = seed;
        let m = DMatrix::from_fn(p, t, |_, _| {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 11) as f64 / (1u64 << 53) as f64 - 0.5) * 0.2
        });
        let panel = ReturnsPanel::from_matrix(m).unwrap();
        let mut buf = Vec::new();
        write_panel_csv(&panel, &mut buf).unwrap();
        let back = read_raw_panel::<f64, _>(buf.as_slice(), &RawMode::Excess).unwrap().complete().unwrap();
        prop_assert_eq!(back.returns, panel.returns);
        prop_assert_eq!(back.asset_ids, panel.asset_ids);
        prop_assert_eq!(back.dates, panel.dates);
    }

    #[test]
    fn symmetrize_is_idempotent(m in matrix(5, 5, -3.0, 3.0)) {
        let s = symmetrize(&m);
        prop_assert_eq!(&s, &s.transpose());
        prop_assert_eq!(symmetrize(&s), s.clone());
        for i in 0..5 {
            for j in 0..5 {
                prop_assert!(s[(i, j)].abs() <= m[(i, j)].abs().max(m[(j, i)].abs()));
            }
        }
    }

    #[test]
    fn cleaning_is_idempotent_and_positive(m in matrix(5, 5, -2.0, 2.0)) {
        let s = symmetrize(&m);
        prop_assume!(sym_eigenvalues_desc(&s)[0] > 1e-3);
        let c = eigenvalue_clean(&s).unwrap();
        let vals = sym_eigenvalues_desc(&c);
        prop_assert!(vals[vals.len() - 1] > 0.0);
        let cc = eigenvalue_clean(&c).unwrap();
        prop_assert!((&cc - &c).abs().max() <= 1e-10 * (1.0 + c.abs().max()));
    }

    #[test]
    fn warm_start_matches_cold_start(x in matrix(30, 12, -1.0, 1.0), y in matrix(30, 1, -1.0, 1.0)) {
        let y = y.column(0).into_owned();
        let opts = LassoOptions::default();
        let lmax = (x.tr_mul(&y) / 30.0).abs().max();
        prop_assume!(lmax > 1e-3);
        let grid = lambda_grid(lmax, 12, 1e-2);
        let path = lasso_path(&x, &y, &grid, &opts).unwrap();
        for (fit, &l) in path.iter().zip(&grid) {
            let cold = lasso_fit(&x, &y, l, &opts).unwrap();
            prop_assert!((fit.objective - cold.objective).abs() <= 1e-9 * (1.0 + cold.objective));
            prop_assert!((&fit.coefficients - &cold.coefficients).abs().max() <= 1e-5);
        }
    }

    #[test]
    fn mrc_hits_its_risk_target(sigma in spd(4), m in matrix(4, 1, -0.05, 0.05), target in 0.01f64..0.2) {
        let m = m.column(0).into_owned();
        prop_assume!(m.norm() > 1e-3);
        let theta = sigma.clone().try_inverse().unwrap();
        let w = mrc(&theta, &m, target).unwrap().weights;
        let var = (w.transpose() * &sigma * &w)[(0, 0)];
        prop_assert!((var - target * target).abs() <= 1e-9 * target * target);
    }

    #[test]
    fn gmv_beats_every_feasible_perturbation(sigma in spd(3), d in matrix(3, 1, -1.0, 1.0)) {
        let theta = sigma.clone().try_inverse().unwrap();
        let w = gmv(&theta).unwrap().weights;
        prop_assert!((w.sum() - 1.0).abs() < 1e-12);
        let mut dir = d.column(0).into_owned();
        let mean = dir.mean();
        dir.add_scalar_mut(-mean);
        let var = |v: &DVector<f64>| (v.transpose() * &sigma * v)[(0, 0)];
        for step in [1e-3, 1e-1, 1.0] {
            let alt = &w + &dir * step;
            prop_assert!(var(&w) <= var(&alt) + 1e-12);
        }
    }

    #[test]
    fn weights_respond_to_return_scaling(r in matrix(3, 40, -0.1, 0.1), c in 0.1f64..10.0) {
        let shifted = r.add_scalar(0.01);
        let scaled = &shifted * c;
        let t0 = sample_inverse(&shifted).unwrap().theta;
        let t1 = sample_inverse(&scaled).unwrap().theta;
        let g0 = gmv(&t0).unwrap().weights;
        let g1 = gmv(&t1).unwrap().weights;
        prop_assert!((&g0 - &g1).abs().max() <= 1e-8 * (1.0 + g0.abs().max()));
        let m0 = DVector::from_fn(3, |i, _| shifted.row(i).mean());
        prop_assume!(m0.norm() > 1e-3);
        let w0 = mrc(&t0, &m0, 0.05).unwrap().weights;
        let w1 = mrc(&t1, &(&m0 * c), 0.05).unwrap().weights;
        prop_assert!((&w0 / c - &w1).abs().max() <= 1e-8 * (1.0 + w0.abs().max()));
    }

    #[test]
    fn costs_only_subtract(
        w in matrix(3, 7, -0.5, 1.0),
        r in matrix(3, 6, -0.1, 0.1),
        c1 in 0.0f64..0.02,
        dc in 0.0f64..0.02,
    ) {
        let weights: Vec<DVector<f64>> = w.column_iter().map(|c| c.into_owned()).collect();
        let returns: Vec<DVector<f64>> = r.column_iter().map(|c| c.into_owned()).collect();
        let rf = [0.001; 6];
        let run = |c| perf_with_tc(&weights, &returns, &rf, c, DriftConvention::PreCost);
        let (Ok(zero), Ok(lo), Ok(hi)) = (run(0.0), run(c1), run(c1 + dc)) else {
            return Err(TestCaseError::reject("degenerate path"));
        };
        prop_assert_eq!(&zero.net, &zero.gross);
        prop_assert!(lo.turnover.iter().all(|&v| v >= 0.0));
        prop_assert!(hi.performance.mean <= lo.performance.mean + 1e-15);
        let mean = lo.net.iter().sum::<f64>() / 6.0;
        prop_assert!((mean - lo.performance.mean).abs() <= 1e-15);
        let tv = lo.turnover.iter().sum::<f64>() / 6.0;
        prop_assert!((tv - lo.mean_turnover).abs() <= 1e-15);
    }

    #[test]
    fn cer_composes(a in prop::collection::vec(-0.5f64..0.5, 1..12), b in prop::collection::vec(-0.5f64..0.5, 1..12)) {
        let joined: Vec<f64> = a.iter().chain(&b).copied().collect();
        let lhs = cer(&joined);
        let rhs = (1.0 + cer(&a)) * (1.0 + cer(&b)) - 1.0;
        prop_assert!((lhs - rhs).abs() <= 1e-12);
    }
}
