//! Dense linear-model engine shared by every estimator in the crate.
//!
//! Least squares is solved through a Householder QR factorization of the
//! (square-root weighted) design, never through the normal equations. A
//! column is reported as collinear when its QR pivot falls below
//! [`RANK_TOLERANCE`] times the largest pivot.
//!
//! The engine covers OLS/WLS, absorption of one fixed-effect factor,
//! CR1 cluster-robust and HC1 sandwich errors, two-stage least squares and
//! delta-method standard errors for coefficient ratios.

use std::collections::HashMap;
use std::hash::Hash;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

/// Relative pivot tolerance used for rank detection.
pub const RANK_TOLERANCE: f64 = 1e-10;

/// Label used for the constant column added by [`DesignMatrix::with_intercept`].
pub const INTERCEPT: &str = "(intercept)";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RegressError {
    #[error("design is rank deficient: column `{column}` is collinear with earlier columns")]
    RankDeficient { column: String },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("non-finite input: {0}")]
    NonFiniteInput(String),
    #[error("cluster-robust errors need at least two clusters")]
    SingleCluster,
    #[error("under-identified: {endogenous} endogenous regressors but only {instruments} instruments")]
    UnderIdentified { endogenous: usize, instruments: usize },
    #[error("ratio denominator {0:e} is too close to zero")]
    DenominatorNearZero(f64),
    #[error("unknown column `{0}`")]
    UnknownColumn(String),
    #[error("duplicate column label `{0}`")]
    DuplicateLabel(String),
}

pub type Result<T> = std::result::Result<T, RegressError>;

/// Regressor matrix with one label per column.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignMatrix {
    values: DMatrix<f64>,
    labels: Vec<String>,
}

impl DesignMatrix {
    pub fn new(values: DMatrix<f64>, labels: Vec<String>) -> Result<Self> {
        if labels.len() != values.ncols() {
            return Err(RegressError::DimensionMismatch(format!(
                "{} labels for {} columns",
                labels.len(),
                values.ncols()
            )));
        }
        if values.nrows() < values.ncols() {
            return Err(RegressError::DimensionMismatch(format!(
                "{} rows cannot identify {} columns",
                values.nrows(),
                values.ncols()
            )));
        }
        for (j, label) in labels.iter().enumerate() {
            if labels[..j].contains(label) {
                return Err(RegressError::DuplicateLabel(label.clone()));
            }
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            let (r, c) = (pos % values.nrows(), pos / values.nrows());
            return Err(RegressError::NonFiniteInput(format!(
                "row {r}, column `{}`",
                labels[c]
            )));
        }
        Ok(Self { values, labels })
    }

    /// Builds a design from labelled columns of equal length.
    pub fn from_columns<S: Into<String>>(columns: Vec<(S, Vec<f64>)>) -> Result<Self> {
        let nrows = columns.first().map_or(0, |(_, c)| c.len());
        let mut labels = Vec::with_capacity(columns.len());
        let mut data = Vec::with_capacity(nrows * columns.len());
        for (label, col) in columns {
            let label = label.into();
            if col.len() != nrows {
                return Err(RegressError::DimensionMismatch(format!(
                    "column `{label}` has {} rows, expected {nrows}",
                    col.len()
                )));
            }
            data.extend_from_slice(&col);
            labels.push(label);
        }
        Self::new(DMatrix::from_vec(nrows, labels.len(), data), labels)
    }

    /// Returns a copy with a leading column of ones labelled [`INTERCEPT`].
    pub fn with_intercept(&self) -> Result<Self> {
        let values = self.values.clone().insert_column(0, 1.0);
        let mut labels = Vec::with_capacity(self.labels.len() + 1);
        labels.push(INTERCEPT.to_string());
        labels.extend(self.labels.iter().cloned());
        Self::new(values, labels)
    }

    /// Horizontal concatenation `[self other]`.
    pub fn hstack(&self, other: &DesignMatrix) -> Result<Self> {
        if self.rows() != other.rows() {
            return Err(RegressError::DimensionMismatch(format!(
                "cannot stack {} rows with {} rows",
                self.rows(),
                other.rows()
            )));
        }
        let mut values = DMatrix::zeros(self.rows(), self.columns() + other.columns());
        values.columns_mut(0, self.columns()).copy_from(&self.values);
        values
            .columns_mut(self.columns(), other.columns())
            .copy_from(&other.values);
        let mut labels = self.labels.clone();
        labels.extend(other.labels.iter().cloned());
        Self::new(values, labels)
    }

    pub fn rows(&self) -> usize {
        self.values.nrows()
    }

    pub fn columns(&self) -> usize {
        self.values.ncols()
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn column_labels(&self) -> &[String] {
        &self.labels
    }

    pub fn column(&self, label: &str) -> Option<Vec<f64>> {
        let j = self.labels.iter().position(|l| l == label)?;
        Some(self.values.column(j).iter().copied().collect())
    }

    /// True when some column is identically one.
    pub fn intercept_included(&self) -> bool {
        (0..self.columns()).any(|j| self.values.column(j).iter().all(|&v| v == 1.0))
    }
}

/// Output of a least-squares fit.
#[derive(Debug, Clone)]
pub struct FitResult {
    pub coefficients: Vec<f64>,
    pub residuals: Vec<f64>,
    pub se_homoskedastic: Vec<f64>,
    pub se_cluster: Option<Vec<f64>>,
    pub r_squared: f64,
    pub n_obs: usize,
    pub n_clusters: Option<usize>,
    pub labels: Vec<String>,
    /// Observation weights, when the fit was weighted.
    pub weights: Option<Vec<f64>>,
    /// `(X'WX)^{-1}`.
    pub bread: DMatrix<f64>,
    /// Residual variance `Σ w e² / df`.
    pub sigma2: f64,
    /// Residual degrees of freedom used for `sigma2`.
    pub df_resid: usize,
    /// Full cluster-robust covariance, set by [`FitResult::with_cluster_se`].
    pub cov_cluster: Option<DMatrix<f64>>,
}

impl FitResult {
    pub fn index_of(&self, label: &str) -> Result<usize> {
        self.labels
            .iter()
            .position(|l| l == label)
            .ok_or_else(|| RegressError::UnknownColumn(label.to_string()))
    }

    pub fn coef(&self, label: &str) -> Result<f64> {
        Ok(self.coefficients[self.index_of(label)?])
    }

    /// Cluster-robust SE when available, else the homoskedastic one.
    pub fn se(&self, label: &str) -> Result<f64> {
        let j = self.index_of(label)?;
        Ok(match &self.se_cluster {
            Some(se) => se[j],
            None => self.se_homoskedastic[j],
        })
    }

    pub fn cov_homoskedastic(&self) -> DMatrix<f64> {
        &self.bread * self.sigma2
    }

    /// Preferred coefficient covariance: cluster-robust if computed.
    pub fn cov(&self) -> DMatrix<f64> {
        self.cov_cluster
            .clone()
            .unwrap_or_else(|| self.cov_homoskedastic())
    }

    /// Recomputes homoskedastic SEs after `absorbed` fixed effects were
    /// partialled out of the design before fitting.
    pub fn with_absorbed_df(mut self, absorbed: usize) -> Self {
        let k = self.coefficients.len();
        let df = self.n_obs.saturating_sub(k + absorbed).max(1);
        let ssr: f64 = weighted_ssr(&self.residuals, self.weights.as_deref());
        self.df_resid = df;
        self.sigma2 = ssr / df as f64;
        self.se_homoskedastic = (0..k)
            .map(|j| (self.sigma2 * self.bread[(j, j)]).max(0.0).sqrt())
            .collect();
        self
    }

    /// Attaches CR1 cluster-robust errors computed against `x`.
    pub fn with_cluster_se<K: Hash + Eq + Clone>(
        mut self,
        x: &DesignMatrix,
        cluster_ids: &[K],
    ) -> Result<Self> {
        let (cov, g) = cluster_robust_cov(&self, x, cluster_ids)?;
        self.se_cluster = Some(diag_sqrt(&cov));
        self.n_clusters = Some(g);
        self.cov_cluster = Some(cov);
        Ok(self)
    }
}

/// Coefficient ratio with a delta-method standard error.
#[derive(Debug, Clone, PartialEq)]
pub struct RatioEstimate {
    pub value: f64,
    pub se: f64,
    pub numerator_label: String,
    pub denominator_label: String,
}

fn weighted_ssr(residuals: &[f64], weights: Option<&[f64]>) -> f64 {
    match weights {
        Some(w) => residuals.iter().zip(w).map(|(e, w)| w * e * e).sum(),
        None => residuals.iter().map(|e| e * e).sum(),
    }
}

fn diag_sqrt(m: &DMatrix<f64>) -> Vec<f64> {
    (0..m.nrows()).map(|j| m[(j, j)].max(0.0).sqrt()).collect()
}

fn check_weights(weights: Option<&[f64]>, n: usize, k: usize) -> Result<()> {
    if let Some(w) = weights {
        if w.len() != n {
            return Err(RegressError::DimensionMismatch(format!(
                "{} weights for {n} rows",
                w.len()
            )));
        }
        if let Some(i) = w.iter().position(|v| !v.is_finite() || *v < 0.0) {
            return Err(RegressError::NonFiniteInput(format!(
                "weight {} at row {i} is not a finite nonnegative number",
                w[i]
            )));
        }
        let positive = w.iter().filter(|&&v| v > 0.0).count();
        if positive < k {
            return Err(RegressError::DimensionMismatch(format!(
                "only {positive} positive weights for {k} columns"
            )));
        }
    }
    Ok(())
}

/// Ordinary or weighted least squares of `y` on the columns of `x`.
pub fn ols_fit(x: &DesignMatrix, y: &[f64], weights: Option<&[f64]>) -> Result<FitResult> {
    let (n, k) = (x.rows(), x.columns());
    if y.len() != n {
        return Err(RegressError::DimensionMismatch(format!(
            "{} responses for {n} design rows",
            y.len()
        )));
    }
    if let Some(i) = y.iter().position(|v| !v.is_finite()) {
        return Err(RegressError::NonFiniteInput(format!("response at row {i}")));
    }
    check_weights(weights, n, k)?;
    if k == 0 {
        return Err(RegressError::DimensionMismatch("design has no columns".into()));
    }

    let mut xw = x.values.clone();
    let mut yw = DVector::from_column_slice(y);
    if let Some(w) = weights {
        for (i, wi) in w.iter().enumerate() {
            let s = wi.sqrt();
            xw.row_mut(i).scale_mut(s);
            yw[i] *= s;
        }
    }

    let qr = xw.qr();
    let r = qr.r();
    let max_pivot = (0..k).map(|j| r[(j, j)].abs()).fold(0.0, f64::max);
    for j in 0..k {
        if r[(j, j)].abs() <= RANK_TOLERANCE * max_pivot {
            return Err(RegressError::RankDeficient {
                column: x.labels[j].clone(),
            });
        }
    }
    qr.q_tr_mul(&mut yw);
    let rhs = yw.rows(0, k).into_owned();
    let beta = r
        .solve_upper_triangular(&rhs)
        .ok_or_else(|| RegressError::RankDeficient {
            column: x.labels[k - 1].clone(),
        })?;
    let r_inv = r
        .solve_upper_triangular(&DMatrix::identity(k, k))
        .ok_or_else(|| RegressError::RankDeficient {
            column: x.labels[k - 1].clone(),
        })?;
    let bread = &r_inv * r_inv.transpose();

    let fitted = &x.values * &beta;
    let residuals: Vec<f64> = y.iter().zip(fitted.iter()).map(|(y, f)| y - f).collect();
    let n_obs = weights.map_or(n, |w| w.iter().filter(|&&v| v > 0.0).count());
    let ssr = weighted_ssr(&residuals, weights);
    let df_resid = n_obs.saturating_sub(k).max(1);
    let sigma2 = ssr / df_resid as f64;
    let se_homoskedastic = (0..k)
        .map(|j| (sigma2 * bread[(j, j)]).max(0.0).sqrt())
        .collect();

    let r_squared = {
        let (sw, swy) = match weights {
            Some(w) => (w.iter().sum::<f64>(), w.iter().zip(y).map(|(w, y)| w * y).sum()),
            None => (n as f64, y.iter().sum::<f64>()),
        };
        let centre = if x.intercept_included() { swy / sw } else { 0.0 };
        let sst: f64 = match weights {
            Some(w) => y.iter().zip(w).map(|(y, w)| w * (y - centre).powi(2)).sum(),
            None => y.iter().map(|y| (y - centre).powi(2)).sum(),
        };
        if sst > 0.0 {
            (1.0 - ssr / sst).clamp(0.0, 1.0)
        } else {
            0.0
        }
    };

    Ok(FitResult {
        coefficients: beta.iter().copied().collect(),
        residuals,
        se_homoskedastic,
        se_cluster: None,
        r_squared,
        n_obs,
        n_clusters: None,
        labels: x.labels.clone(),
        weights: weights.map(<[f64]>::to_vec),
        bread,
        sigma2,
        df_resid,
        cov_cluster: None,
    })
}

/// CR1 cluster-robust covariance and the number of clusters.
///
/// `V = c · B M B` with `B = (X'WX)^{-1}`, `M = Σ_g s_g s_g'`,
/// `s_g = Σ_{i∈g} w_i x_i e_i` and `c = G/(G-1) · (N-1)/(N-K)`.
pub fn cluster_robust_cov<K: Hash + Eq + Clone>(
    fit: &FitResult,
    x: &DesignMatrix,
    cluster_ids: &[K],
) -> Result<(DMatrix<f64>, usize)> {
    let (n, k) = (x.rows(), x.columns());
    if cluster_ids.len() != n || fit.residuals.len() != n || fit.coefficients.len() != k {
        return Err(RegressError::DimensionMismatch(format!(
            "fit ({} residuals, {} coefficients) does not match design {n}x{k} with {} cluster ids",
            fit.residuals.len(),
            fit.coefficients.len(),
            cluster_ids.len()
        )));
    }
    let mut index: HashMap<&K, usize> = HashMap::new();
    let mut scores: Vec<DVector<f64>> = Vec::new();
    for (i, id) in cluster_ids.iter().enumerate() {
        let w = fit.weights.as_ref().map_or(1.0, |w| w[i]);
        if w == 0.0 {
            continue;
        }
        let g = *index.entry(id).or_insert_with(|| {
            scores.push(DVector::zeros(k));
            scores.len() - 1
        });
        let we = w * fit.residuals[i];
        for j in 0..k {
            scores[g][j] += x.values[(i, j)] * we;
        }
    }
    let g = scores.len();
    if g < 2 {
        return Err(RegressError::SingleCluster);
    }
    let mut meat = DMatrix::zeros(k, k);
    for s in &scores {
        meat.ger(1.0, s, s, 1.0);
    }
    let n_obs = fit.n_obs as f64;
    let c = (g as f64 / (g as f64 - 1.0)) * ((n_obs - 1.0) / (n_obs - k as f64).max(1.0));
    let cov = &fit.bread * meat * &fit.bread * c;
    Ok((cov, g))
}

/// Square roots of the CR1 covariance diagonal.
pub fn cluster_robust_se<K: Hash + Eq + Clone>(
    fit: &FitResult,
    x: &DesignMatrix,
    cluster_ids: &[K],
) -> Result<Vec<f64>> {
    cluster_robust_cov(fit, x, cluster_ids).map(|(cov, _)| diag_sqrt(&cov))
}

/// HC1 heteroskedasticity-robust SEs (every row its own cluster).
pub fn hc1_se(fit: &FitResult, x: &DesignMatrix) -> Result<Vec<f64>> {
    let ids: Vec<usize> = (0..x.rows()).collect();
    cluster_robust_se(fit, x, &ids)
}

/// Within-group demeaning of `x` and `y` (one absorbed factor).
pub fn absorb_fixed_effects<K: Hash + Eq + Clone>(
    x: &DesignMatrix,
    y: &[f64],
    group_ids: &[K],
) -> Result<(DesignMatrix, Vec<f64>)> {
    absorb_fixed_effects_weighted(x, y, group_ids, None)
}

/// Weighted within-group demeaning; a subsequent WLS fit with the same
/// weights reproduces the dummy-variable WLS slopes.
pub fn absorb_fixed_effects_weighted<K: Hash + Eq + Clone>(
    x: &DesignMatrix,
    y: &[f64],
    group_ids: &[K],
    weights: Option<&[f64]>,
) -> Result<(DesignMatrix, Vec<f64>)> {
    let (n, k) = (x.rows(), x.columns());
    if y.len() != n || group_ids.len() != n {
        return Err(RegressError::DimensionMismatch(format!(
            "design has {n} rows, y has {}, group ids {}",
            y.len(),
            group_ids.len()
        )));
    }
    if let Some(w) = weights {
        if w.len() != n {
            return Err(RegressError::DimensionMismatch(format!(
                "{} weights for {n} rows",
                w.len()
            )));
        }
    }
    let mut index: HashMap<&K, usize> = HashMap::new();
    let group: Vec<usize> = group_ids
        .iter()
        .map(|id| {
            let next = index.len();
            *index.entry(id).or_insert(next)
        })
        .collect();
    let g = index.len();
    let mut wsum = vec![0.0; g];
    let mut sums = vec![0.0; g * (k + 1)];
    for i in 0..n {
        let w = weights.map_or(1.0, |w| w[i]);
        let gi = group[i];
        wsum[gi] += w;
        for j in 0..k {
            sums[gi * (k + 1) + j] += w * x.values[(i, j)];
        }
        sums[gi * (k + 1) + k] += w * y[i];
    }
    let mean = |gi: usize, j: usize| {
        if wsum[gi] > 0.0 {
            sums[gi * (k + 1) + j] / wsum[gi]
        } else {
            0.0
        }
    };
    let mut xd = x.values.clone();
    let mut yd = y.to_vec();
    for i in 0..n {
        let gi = group[i];
        for j in 0..k {
            xd[(i, j)] -= mean(gi, j);
        }
        yd[i] -= mean(gi, k);
    }
    Ok((DesignMatrix::new(xd, x.labels.clone())?, yd))
}

/// Number of distinct groups, used for degrees-of-freedom bookkeeping.
pub fn count_groups<K: Hash + Eq>(ids: &[K]) -> usize {
    ids.iter().collect::<std::collections::HashSet<_>>().len()
}

/// Two-stage least squares fit and its diagnostics.
#[derive(Debug, Clone)]
pub struct TslsFit {
    /// Second-stage coefficients, with residuals recomputed against the
    /// observed (not fitted) endogenous regressors.
    pub fit: FitResult,
    /// `[fitted endogenous, exogenous]`, the design the sandwich uses.
    pub second_stage_design: DesignMatrix,
    /// Partial F statistic of the excluded instruments, per endogenous column.
    pub first_stage_f: Vec<f64>,
}

impl TslsFit {
    pub fn with_cluster_se<K: Hash + Eq + Clone>(mut self, cluster_ids: &[K]) -> Result<Self> {
        self.fit = self.fit.with_cluster_se(&self.second_stage_design, cluster_ids)?;
        Ok(self)
    }
}

/// Standard 2SLS: project each endogenous column on `[X_exog Z]`, then
/// regress `y` on `[fitted endogenous, X_exog]`.
pub fn tsls_fit(
    y: &[f64],
    x_endog: &DesignMatrix,
    x_exog: Option<&DesignMatrix>,
    z: &DesignMatrix,
) -> Result<TslsFit> {
    let n = y.len();
    if z.columns() < x_endog.columns() {
        return Err(RegressError::UnderIdentified {
            endogenous: x_endog.columns(),
            instruments: z.columns(),
        });
    }
    if x_endog.rows() != n || z.rows() != n || x_exog.is_some_and(|e| e.rows() != n) {
        return Err(RegressError::DimensionMismatch(
            "y, endogenous, exogenous and instrument blocks need equal row counts".into(),
        ));
    }
    let first_design = match x_exog {
        Some(e) => e.hstack(z)?,
        None => z.clone(),
    };
    let mut fitted_cols = Vec::with_capacity(x_endog.columns());
    let mut first_stage_f = Vec::with_capacity(x_endog.columns());
    for (j, label) in x_endog.column_labels().iter().enumerate() {
        let xj: Vec<f64> = x_endog.values().column(j).iter().copied().collect();
        let unrestricted = ols_fit(&first_design, &xj, None)?;
        let ssr_u: f64 = unrestricted.residuals.iter().map(|e| e * e).sum();
        let ssr_r: f64 = match x_exog {
            Some(e) => ols_fit(e, &xj, None)?.residuals.iter().map(|e| e * e).sum(),
            None => xj.iter().map(|v| v * v).sum(),
        };
        let m = z.columns() as f64;
        let df = (n - first_design.columns()) as f64;
        first_stage_f.push(if ssr_u > 0.0 {
            ((ssr_r - ssr_u) / m) / (ssr_u / df)
        } else {
            f64::INFINITY
        });
        let fitted: Vec<f64> = xj
            .iter()
            .zip(&unrestricted.residuals)
            .map(|(x, e)| x - e)
            .collect();
        fitted_cols.push((label.clone(), fitted));
    }
    let fitted_endog = DesignMatrix::from_columns(fitted_cols)?;
    let second_design = match x_exog {
        Some(e) => fitted_endog.hstack(e)?,
        None => fitted_endog,
    };
    let observed_design = match x_exog {
        Some(e) => x_endog.hstack(e)?,
        None => x_endog.clone(),
    };
    let mut fit = ols_fit(&second_design, y, None)?;
    let beta = DVector::from_column_slice(&fit.coefficients);
    let structural = observed_design.values() * beta;
    fit.residuals = y.iter().zip(structural.iter()).map(|(y, f)| y - f).collect();
    let k = fit.coefficients.len();
    fit.sigma2 = weighted_ssr(&fit.residuals, None) / fit.df_resid as f64;
    fit.se_homoskedastic = (0..k)
        .map(|j| (fit.sigma2 * fit.bread[(j, j)]).max(0.0).sqrt())
        .collect();
    Ok(TslsFit {
        fit,
        second_stage_design: second_design,
        first_stage_f,
    })
}

/// `ψ_num / ψ_den` with SE `sqrt(g'Σg)`, `g = (1/ψ_den, -ψ_num/ψ_den²)`.
pub fn delta_ratio(
    fit: &FitResult,
    numerator_col: &str,
    denominator_col: &str,
    coef_cov: &DMatrix<f64>,
) -> Result<RatioEstimate> {
    let (i, j) = (fit.index_of(numerator_col)?, fit.index_of(denominator_col)?);
    let k = fit.coefficients.len();
    if coef_cov.nrows() != k || coef_cov.ncols() != k {
        return Err(RegressError::DimensionMismatch(format!(
            "covariance is {}x{}, expected {k}x{k}",
            coef_cov.nrows(),
            coef_cov.ncols()
        )));
    }
    let (num, den) = (fit.coefficients[i], fit.coefficients[j]);
    if den.abs() <= 1e-12 {
        return Err(RegressError::DenominatorNearZero(den));
    }
    let (gn, gd) = (1.0 / den, -num / (den * den));
    let var = gn * gn * coef_cov[(i, i)]
        + gd * gd * coef_cov[(j, j)]
        + 2.0 * gn * gd * coef_cov[(i, j)];
    Ok(RatioEstimate {
        value: num / den,
        se: var.max(0.0).sqrt(),
        numerator_label: numerator_col.to_string(),
        denominator_label: denominator_col.to_string(),
    })
}
