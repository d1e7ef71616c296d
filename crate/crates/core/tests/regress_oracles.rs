//! The regression engine checked against direct matrix formulas, a
//! hand-written sandwich, dummy-variable regressions and a bootstrap.

use approx::assert_relative_eq;
use endurance::regress::{self, DesignMatrix, INTERCEPT};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

mod common;

use common::normal;

#[test]
fn ols_matches_normal_equations() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let n = 60;
    let x1: Vec<f64> = (0..n).map(|_| normal(&mut rng)).collect();
    let x2: Vec<f64> = (0..n).map(|_| normal(&mut rng)).collect();
    let y: Vec<f64> = (0..n).map(|i| 0.3 + 1.5 * x1[i] - 0.7 * x2[i] + normal(&mut rng)).collect();
    let x = DesignMatrix::from_columns(vec![("x1", x1.clone()), ("x2", x2.clone())])
        .unwrap()
        .with_intercept()
        .unwrap();
    let fit = regress::ols_fit(&x, &y, None).unwrap();

    let xm = DMatrix::from_fn(n, 3, |i, j| [1.0, x1[i], x2[i]][j]);
    let yv = DVector::from_vec(y.clone());
    let xtx_inv = (xm.transpose() * &xm).try_inverse().unwrap();
    let beta = &xtx_inv * xm.transpose() * &yv;
    let resid = &yv - &xm * &beta;
    let s2 = resid.dot(&resid) / (n - 3) as f64;
    for (j, label) in [INTERCEPT, "x1", "x2"].iter().enumerate() {
        assert_relative_eq!(fit.coef(label).unwrap(), beta[j], epsilon = 1e-12);
        assert_relative_eq!(fit.se_homoskedastic[fit.index_of(label).unwrap()], (s2 * xtx_inv[(j, j)]).sqrt(), epsilon = 1e-12);
    }
}

#[test]
fn cluster_sandwich_nine_rows_three_clusters() {
    assert!(common::nine_row_sandwich_gap() < 1e-12);
}

#[test]
fn hc1_is_one_cluster_per_row() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let n = 40;
    let x1: Vec<f64> = (0..n).map(|_| normal(&mut rng)).collect();
    let y: Vec<f64> = x1.iter().map(|v| 2.0 * v + v.abs() * normal(&mut rng)).collect();
    let x = DesignMatrix::from_columns(vec![("x1", x1.clone())]).unwrap().with_intercept().unwrap();
    let fit = regress::ols_fit(&x, &y, None).unwrap();
    let hc1 = regress::hc1_se(&fit, &x).unwrap();
    // White's estimator with the n/(n-k) correction
    let ix = fit.index_of("x1").unwrap();
    let xm = DMatrix::from_fn(n, 2, |i, j| if j == ix { x1[i] } else { 1.0 });
    let inv = (xm.transpose() * &xm).try_inverse().unwrap();
    let mut meat = DMatrix::zeros(2, 2);
    for i in 0..n {
        let row = xm.row(i).transpose();
        meat += &row * row.transpose() * fit.residuals[i].powi(2);
    }
    let v = &inv * meat * &inv * (n as f64 / (n - 2) as f64);
    for j in 0..2 {
        assert_relative_eq!(hc1[j], v[(j, j)].sqrt(), epsilon = 1e-12);
    }
}

#[test]
fn absorbed_fixed_effects_match_dummy_regression() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let n = 90;
    let groups: Vec<u32> = (0..n).map(|i| (i % 6) as u32).collect();
    let x1: Vec<f64> = (0..n).map(|i| normal(&mut rng) + groups[i] as f64 * 0.3).collect();
    let w: Vec<f64> = (0..n).map(|i| 1.0 + (i % 4) as f64).collect();
    let y: Vec<f64> = (0..n).map(|i| groups[i] as f64 - 0.8 * x1[i] + normal(&mut rng)).collect();
    let x = DesignMatrix::from_columns(vec![("x1", x1.clone())]).unwrap();

    for weights in [None, Some(w.as_slice())] {
        let (xd, yd) = regress::absorb_fixed_effects_weighted(&x, &y, &groups, weights).unwrap();
        let within = regress::ols_fit(&xd, &yd, weights).unwrap();
        let mut cols = vec![("x1".to_string(), x1.clone())];
        for g in 1..6u32 {
            cols.push((format!("g{g}"), groups.iter().map(|&v| (v == g) as u8 as f64).collect()));
        }
        let dummies = DesignMatrix::from_columns(cols).unwrap().with_intercept().unwrap();
        let full = regress::ols_fit(&dummies, &y, weights).unwrap();
        assert_relative_eq!(within.coef("x1").unwrap(), full.coef("x1").unwrap(), epsilon = 1e-12);
        // with the absorbed degrees of freedom the classical SEs agree too
        let within = within.with_absorbed_df(6);
        assert_relative_eq!(within.se("x1").unwrap(), full.se("x1").unwrap(), epsilon = 1e-10);
    }
}

#[test]
fn tsls_with_instruments_equal_to_regressors_is_ols() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let n = 200;
    let a: Vec<f64> = (0..n).map(|_| normal(&mut rng)).collect();
    let b: Vec<f64> = (0..n).map(|_| normal(&mut rng)).collect();
    let c: Vec<f64> = (0..n).map(|_| normal(&mut rng)).collect();
    let y: Vec<f64> = (0..n).map(|i| 1.0 + a[i] - 2.0 * b[i] + 0.5 * c[i] + normal(&mut rng)).collect();
    let endog = DesignMatrix::from_columns(vec![("a", a.clone()), ("b", b.clone())]).unwrap();
    let exog = DesignMatrix::from_columns(vec![("c", c.clone())]).unwrap().with_intercept().unwrap();
    let z = DesignMatrix::from_columns(vec![("za", a.clone()), ("zb", b.clone())]).unwrap();
    let iv = regress::tsls_fit(&y, &endog, Some(&exog), &z).unwrap();
    let ols = regress::ols_fit(&endog.hstack(&exog).unwrap(), &y, None).unwrap();
    for l in ["a", "b", "c", INTERCEPT] {
        assert_relative_eq!(iv.fit.coef(l).unwrap(), ols.coef(l).unwrap(), epsilon = 1e-10);
        assert_relative_eq!(iv.fit.se(l).unwrap(), ols.se(l).unwrap(), epsilon = 1e-10);
    }
    assert!(iv.first_stage_f.iter().all(|f| f.is_infinite() || *f > 1e6));
}

#[test]
fn delta_ratio_matches_parametric_bootstrap() {
    let (delta, boot) = common::delta_and_bootstrap_se();
    let rel = (delta - boot).abs() / boot;
    println!("delta se {delta:.6}, bootstrap sd {boot:.6}, relative gap {rel:.4}");
    assert!(rel < 0.02);
}

fn dataset() -> impl Strategy<Value = (Vec<f64>, Vec<f64>, Vec<f64>)> {
    (8usize..30).prop_flat_map(|n| {
        (
            prop::collection::vec(-5.0..5.0f64, n),
            prop::collection::vec(-5.0..5.0f64, n),
            prop::collection::vec(0.1..3.0f64, n),
        )
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn coefficients_ignore_row_order((x1, y, w) in dataset(), rot in 1usize..7) {
        prop_assume!(x1.iter().any(|v| (v - x1[0]).abs() > 1e-3));
        let x = DesignMatrix::from_columns(vec![("x", x1.clone())]).unwrap().with_intercept().unwrap();
        let a = regress::ols_fit(&x, &y, Some(&w)).unwrap();
        let k = rot % x1.len();
        let rotate = |v: &[f64]| -> Vec<f64> { v[k..].iter().chain(&v[..k]).copied().collect() };
        let xr = DesignMatrix::from_columns(vec![("x", rotate(&x1))]).unwrap().with_intercept().unwrap();
        let b = regress::ols_fit(&xr, &rotate(&y), Some(&rotate(&w))).unwrap();
        for (p, q) in a.coefficients.iter().zip(&b.coefficients) {
            prop_assert!((p - q).abs() < 1e-9);
        }
    }

    #[test]
    fn rescaling_the_outcome_rescales_estimates((x1, y, _w) in dataset(), c in 0.1..10.0f64) {
        prop_assume!(x1.iter().any(|v| (v - x1[0]).abs() > 1e-3));
        let x = DesignMatrix::from_columns(vec![("x", x1.clone())]).unwrap().with_intercept().unwrap();
        let a = regress::ols_fit(&x, &y, None).unwrap();
        let ys: Vec<f64> = y.iter().map(|v| c * v).collect();
        let b = regress::ols_fit(&x, &ys, None).unwrap();
        for (p, q) in a.coefficients.iter().zip(&b.coefficients) {
            prop_assert!((c * p - q).abs() < 1e-8 * (1.0 + q.abs()));
        }
        for (p, q) in a.se_homoskedastic.iter().zip(&b.se_homoskedastic) {
            prop_assert!((c * p - q).abs() < 1e-8 * (1.0 + q.abs()));
        }
    }

    #[test]
    fn scaling_weights_changes_nothing((x1, y, w) in dataset(), c in 0.1..10.0f64) {
        prop_assume!(x1.iter().any(|v| (v - x1[0]).abs() > 1e-3));
        let x = DesignMatrix::from_columns(vec![("x", x1.clone())]).unwrap().with_intercept().unwrap();
        let a = regress::ols_fit(&x, &y, Some(&w)).unwrap();
        let wc: Vec<f64> = w.iter().map(|v| c * v).collect();
        let b = regress::ols_fit(&x, &y, Some(&wc)).unwrap();
        for (p, q) in a.coefficients.iter().zip(&b.coefficients) {
            prop_assert!((p - q).abs() < 1e-9 * (1.0 + p.abs()));
        }
        for (p, q) in a.se_homoskedastic.iter().zip(&b.se_homoskedastic) {
            prop_assert!((p - q).abs() < 1e-9 * (1.0 + p.abs()));
        }
    }

    #[test]
    fn residuals_are_orthogonal_to_regressors((x1, y, _w) in dataset()) {
        prop_assume!(x1.iter().any(|v| (v - x1[0]).abs() > 1e-3));
        let x = DesignMatrix::from_columns(vec![("x", x1.clone())]).unwrap().with_intercept().unwrap();
        let f = regress::ols_fit(&x, &y, None).unwrap();
        let s1: f64 = f.residuals.iter().sum();
        let sx: f64 = f.residuals.iter().zip(&x1).map(|(e, v)| e * v).sum();
        prop_assert!(s1.abs() < 1e-9 && sx.abs() < 1e-8);
    }
}
