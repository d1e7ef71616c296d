//! Fixtures shared by the oracle and acceptance tests.

use endurance::regress::{self, DesignMatrix, INTERCEPT};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Nine rows in three clusters; the CR1 sandwich written out with a 2x2
/// inverse and explicit cluster score sums. Returns the largest absolute
/// difference from the engine's coefficients and covariance.
pub fn nine_row_sandwich_gap() -> f64 {
    let x = [0.5, 1.0, 1.5, 2.0, 3.5, 4.0, 5.0, 5.5, 7.0];
    let y = [1.1, 1.9, 2.2, 3.9, 4.1, 5.8, 6.2, 6.4, 9.1];
    let g = [0, 0, 0, 1, 1, 1, 2, 2, 2];
    let design = DesignMatrix::from_columns(vec![("x", x.to_vec())]).unwrap().with_intercept().unwrap();
    let fit = regress::ols_fit(&design, &y, None).unwrap();
    let (cov, n_clusters) = regress::cluster_robust_cov(&fit, &design, &g).unwrap();
    assert_eq!(n_clusters, 3);

    // OLS by hand
    let n = 9.0;
    let (sx, sy) = (x.iter().sum::<f64>(), y.iter().sum::<f64>());
    let sxx: f64 = x.iter().map(|v| v * v).sum();
    let sxy: f64 = x.iter().zip(&y).map(|(a, b)| a * b).sum();
    let det = n * sxx - sx * sx;
    let b1 = (n * sxy - sx * sy) / det;
    let b0 = (sy - b1 * sx) / n;
    // (X'X)^{-1} for columns [1, x]
    let inv = [[sxx / det, -sx / det], [-sx / det, n / det]];
    // cluster scores u_g = Σ_{i∈g} (1, x_i) e_i
    let mut u = [[0.0; 2]; 3];
    for i in 0..9 {
        let e = y[i] - b0 - b1 * x[i];
        u[g[i]][0] += e;
        u[g[i]][1] += x[i] * e;
    }
    let mut meat = [[0.0; 2]; 2];
    for s in &u {
        for a in 0..2 {
            for b in 0..2 {
                meat[a][b] += s[a] * s[b];
            }
        }
    }
    let c = (3.0 / 2.0) * ((n - 1.0) / (n - 2.0));
    let mut v = [[0.0; 2]; 2];
    for a in 0..2 {
        for b in 0..2 {
            for k in 0..2 {
                for l in 0..2 {
                    v[a][b] += inv[a][k] * meat[k][l] * inv[l][b];
                }
            }
            v[a][b] *= c;
        }
    }
    // look the engine's column order up by label
    let ix = fit.index_of("x").unwrap();
    let ic = fit.index_of(INTERCEPT).unwrap();
    [
        fit.coefficients[ix] - b1,
        fit.coefficients[ic] - b0,
        cov[(ix, ix)] - v[1][1],
        cov[(ic, ic)] - v[0][0],
        cov[(ix, ic)] - v[1][0],
    ]
    .iter()
    .fold(0.0, |m, d| f64::max(m, d.abs()))
}

/// Delta-method SE of a coefficient ratio against the SD of the ratio over
/// 200,000 draws from the coefficients' normal sampling distribution,
/// returned as `(delta, bootstrap)`.
pub fn delta_and_bootstrap_se() -> (f64, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let n = 3000;
    let x1: Vec<f64> = (0..n).map(|_| normal(&mut rng)).collect();
    let x2: Vec<f64> = (0..n).map(|i| 0.4 * x1[i] + normal(&mut rng)).collect();
    let y: Vec<f64> = (0..n).map(|i| 0.2 * x1[i] + 0.6 * x2[i] + normal(&mut rng)).collect();
    let x = DesignMatrix::from_columns(vec![("num", x1), ("den", x2)]).unwrap().with_intercept().unwrap();
    let fit = regress::ols_fit(&x, &y, None).unwrap();
    let cov = fit.cov();
    let r = regress::delta_ratio(&fit, "num", "den", &cov).unwrap();

    let (i, j) = (fit.index_of("num").unwrap(), fit.index_of("den").unwrap());
    let (mn, md) = (fit.coefficients[i], fit.coefficients[j]);
    let (vn, vd, c) = (cov[(i, i)], cov[(j, j)], cov[(i, j)]);
    // Cholesky of the 2x2 block
    let l11 = vn.sqrt();
    let l21 = c / l11;
    let l22 = (vd - l21 * l21).sqrt();
    let draws = 200_000;
    let mut boot = ChaCha8Rng::seed_from_u64(5);
    let ratios: Vec<f64> = (0..draws)
        .map(|_| {
            let (z1, z2) = (normal(&mut boot), normal(&mut boot));
            (mn + l11 * z1) / (md + l21 * z1 + l22 * z2)
        })
        .collect();
    let m = ratios.iter().sum::<f64>() / draws as f64;
    let sd = (ratios.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (draws - 1) as f64).sqrt();
    (r.se, sd)
}
