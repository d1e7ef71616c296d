//! Decomposition of a between-group score gap into an ability part and an
//! endurance part, and the effect of shortening the exam.
//!
//! With per-student scores `alpha + beta * mean_posnorm`, the gap between
//! group 1 and group 0 is
//! `(ᾱ₁ − ᾱ₀) + (β̄₁ − β̄₀) · mean_posnorm`.
//! Halving the exam halves `mean_posnorm`, removing half of the endurance
//! term.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use super::{mean_sd, AnalysisError, Result};
use crate::decompose::SkillEstimates;
use crate::regress::{self, DesignMatrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum GapVariant {
    /// Raw mean differences; components add up to the score gap.
    Unconditional,
    /// Each skill gap controls for the other skill.
    RegressionAdjusted,
}

impl GapVariant {
    pub fn label(&self) -> &'static str {
        match self {
            GapVariant::Unconditional => "unconditional",
            GapVariant::RegressionAdjusted => "regression_adjusted",
        }
    }
}

impl fmt::Display for GapVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for GapVariant {
    type Err = AnalysisError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "unconditional" => Ok(GapVariant::Unconditional),
            "regression_adjusted" => Ok(GapVariant::RegressionAdjusted),
            _ => Err(AnalysisError::Unknown {
                kind: "gap variant",
                value: s.to_string(),
            }),
        }
    }
}

/// Group 1 minus group 0.
#[derive(Debug, Clone, PartialEq)]
pub struct GapReport {
    pub group_label: String,
    pub variant: GapVariant,
    pub n_group1: usize,
    pub n_group0: usize,
    pub mean_posnorm: f64,
    pub score_gap: f64,
    pub se_score_gap: f64,
    pub ability_component: f64,
    pub se_ability: f64,
    pub endurance_component: f64,
    pub se_endurance: f64,
    /// Change in the gap from halving the exam.
    pub reform_delta_pp: f64,
    /// `reform_delta_pp / score_gap`; `None` for a zero gap.
    pub reform_delta_pct: Option<f64>,
}

fn two_sample(x1: &[f64], x0: &[f64]) -> (f64, f64) {
    let (m1, s1) = mean_sd(x1);
    let (m0, s0) = mean_sd(x0);
    let v = s1 * s1 / x1.len() as f64 + s0 * s0 / x0.len() as f64;
    (m1 - m0, v.sqrt())
}

/// Splits students by `in_group` (students missing from the map are
/// ignored) and decomposes the score gap at the given mean position.
pub fn gap_decomposition(
    est: &SkillEstimates,
    group_label: &str,
    in_group: &HashMap<u64, bool>,
    mean_posnorm: f64,
    variant: GapVariant,
) -> Result<GapReport> {
    let mut a = [Vec::new(), Vec::new()];
    let mut b = [Vec::new(), Vec::new()];
    let mut s = [Vec::new(), Vec::new()];
    for r in &est.rows {
        if let Some(&g) = in_group.get(&r.student_id) {
            let g = g as usize;
            a[g].push(r.alpha_hat);
            b[g].push(r.beta_hat);
            s[g].push(r.alpha_hat + r.beta_hat * mean_posnorm);
        }
    }
    for g in 0..2 {
        if a[g].is_empty() {
            return Err(AnalysisError::EmptyGroup(format!("{group_label}={g}")));
        }
    }
    let (score_gap, se_score_gap) = two_sample(&s[1], &s[0]);
    let (ability, se_ability, endurance, se_endurance) = match variant {
        GapVariant::Unconditional => {
            let (da, sa) = two_sample(&a[1], &a[0]);
            let (db, sb) = two_sample(&b[1], &b[0]);
            (da, sa, db * mean_posnorm, sb * mean_posnorm.abs())
        }
        GapVariant::RegressionAdjusted => {
            if a[0].len() + a[1].len() < 4 {
                return Err(AnalysisError::TooFewMatched {
                    found: a[0].len() + a[1].len(),
                    needed: 4,
                });
            }
            let flag: Vec<f64> = [vec![0.0; a[0].len()], vec![1.0; a[1].len()]].concat();
            let alpha: Vec<f64> = [a[0].clone(), a[1].clone()].concat();
            let beta: Vec<f64> = [b[0].clone(), b[1].clone()].concat();
            let adjusted = |y: &[f64], other: &[f64]| -> Result<(f64, f64)> {
                let x = DesignMatrix::from_columns(vec![("group", flag.clone()), ("other", other.to_vec())])?
                    .with_intercept()?;
                let ids: Vec<usize> = (0..y.len()).collect();
                let f = regress::ols_fit(&x, y, None)?.with_cluster_se(&x, &ids)?;
                Ok((f.coef("group")?, f.se("group")?))
            };
            let (da, sa) = adjusted(&alpha, &beta)?;
            let (db, sb) = adjusted(&beta, &alpha)?;
            (da, sa, db * mean_posnorm, sb * mean_posnorm.abs())
        }
    };
    let mut report = GapReport {
        group_label: group_label.to_string(),
        variant,
        n_group1: a[1].len(),
        n_group0: a[0].len(),
        mean_posnorm,
        score_gap,
        se_score_gap,
        ability_component: ability,
        se_ability,
        endurance_component: endurance,
        se_endurance,
        reform_delta_pp: 0.0,
        reform_delta_pct: None,
    };
    let (pp, pct) = reform_counterfactual(&report, 0.5)?;
    report.reform_delta_pp = pp;
    report.reform_delta_pct = pct;
    Ok(report)
}

/// Gap change when average position is scaled by `factor` (½ halves the
/// exam): `−endurance_component × (1 − factor)`, and that change relative
/// to the current gap. A negative percentage means the gap shrinks.
pub fn reform_counterfactual(report: &GapReport, factor: f64) -> Result<(f64, Option<f64>)> {
    if !(factor > 0.0 && factor <= 1.0) {
        return Err(AnalysisError::InvalidFactor(factor));
    }
    let delta = -report.endurance_component * (1.0 - factor);
    let pct = (report.score_gap != 0.0).then(|| delta / report.score_gap);
    Ok((delta, pct))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn report(endurance: f64, gap: f64) -> GapReport {
        GapReport {
            group_label: "g".into(),
            variant: GapVariant::Unconditional,
            n_group1: 1,
            n_group0: 1,
            mean_posnorm: 0.5,
            score_gap: gap,
            se_score_gap: 0.0,
            ability_component: gap - endurance,
            se_ability: 0.0,
            endurance_component: endurance,
            se_endurance: 0.0,
            reform_delta_pp: 0.0,
            reform_delta_pct: None,
        }
    }

    #[test]
    fn halving_the_exam_removes_half_the_endurance_term() {
        // Group 1 trails by 2.6 pp, 1.7 pp of it from endurance.
        let (pp, pct) = reform_counterfactual(&report(-0.017, -0.026), 0.5).unwrap();
        assert!((pp - 0.0085).abs() < 1e-15);
        assert!((pct.unwrap() + 0.3269).abs() < 1e-3);
        // Read with a positive gap, the same shift widens it.
        let (pp, pct) = reform_counterfactual(&report(-0.017, 0.026), 0.5).unwrap();
        assert!((pp - 0.0085).abs() < 1e-15);
        assert!((pct.unwrap() - 0.3269).abs() < 1e-3);
    }

    #[test]
    fn degenerate_reforms() {
        assert_eq!(reform_counterfactual(&report(0.0, 0.01), 0.5).unwrap(), (0.0, Some(0.0)));
        let (pp, _) = reform_counterfactual(&report(-0.02, 0.01), 1.0).unwrap();
        assert_eq!(pp, 0.0);
        assert_eq!(reform_counterfactual(&report(-0.02, 0.0), 0.5).unwrap().1, None);
        assert!(reform_counterfactual(&report(-0.02, 0.01), 0.0).is_err());
    }
}
