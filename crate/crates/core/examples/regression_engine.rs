//! OLS with clustered errors, absorbed fixed effects, 2SLS and a
//! delta-method ratio on a small synthetic dataset.
//!
//!     cargo run --example regression_engine

use endurance::regress::{self, DesignMatrix, INTERCEPT};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn main() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut z = || -> f64 { StandardNormal.sample(&mut rng) };
    let n = 2_000;
    let school: Vec<u32> = (0..n).map(|i| (i % 40) as u32).collect();
    let shock: Vec<f64> = (0..40).map(|_| z()).collect();
    let inst: Vec<f64> = (0..n).map(|_| z()).collect();
    let u: Vec<f64> = (0..n).map(|_| z()).collect();
    // x is endogenous: it shares u with the outcome
    let x: Vec<f64> = (0..n).map(|i| 0.8 * inst[i] + 0.5 * u[i] + z()).collect();
    let w: Vec<f64> = (0..n).map(|_| z()).collect();
    let y: Vec<f64> = (0..n)
        .map(|i| 1.0 + 0.4 * x[i] + 0.2 * w[i] + shock[school[i] as usize] + u[i])
        .collect();

    let design = DesignMatrix::from_columns(vec![("x", x.clone()), ("w", w.clone())])
        .unwrap()
        .with_intercept()
        .unwrap();
    let ols = regress::ols_fit(&design, &y, None).unwrap();
    let clustered = ols.clone().with_cluster_se(&design, &school).unwrap();
    println!("OLS (biased by u):");
    for l in ["x", "w", INTERCEPT] {
        println!(
            "  {l:<10} {:>8.4}  se {:.4}  clustered se {:.4}",
            ols.coef(l).unwrap(),
            ols.se(l).unwrap(),
            clustered.se(l).unwrap()
        );
    }

    // school effects absorbed by demeaning
    let xw = DesignMatrix::from_columns(vec![("x", x.clone()), ("w", w.clone())]).unwrap();
    let (xd, yd) = regress::absorb_fixed_effects(&xw, &y, &school).unwrap();
    let within = regress::ols_fit(&xd, &yd, None).unwrap().with_absorbed_df(40);
    println!("within schools: x {:.4} (se {:.4})", within.coef("x").unwrap(), within.se("x").unwrap());

    let endog = DesignMatrix::from_columns(vec![("x", x)]).unwrap();
    let exog = DesignMatrix::from_columns(vec![("w", w)]).unwrap().with_intercept().unwrap();
    let zmat = DesignMatrix::from_columns(vec![("inst", inst)]).unwrap();
    let iv = regress::tsls_fit(&y, &endog, Some(&exog), &zmat).unwrap();
    println!(
        "2SLS: x {:.4} (se {:.4}), first-stage F {:.0}",
        iv.fit.coef("x").unwrap(),
        iv.fit.se("x").unwrap(),
        iv.first_stage_f[0]
    );

    let ratio = regress::delta_ratio(&iv.fit, "w", "x", &iv.fit.cov()).unwrap();
    println!("w / x = {:.3} (delta-method se {:.3}; truth 0.5)", ratio.value, ratio.se);
}
