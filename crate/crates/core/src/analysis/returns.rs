//! Returns to a one-SD increase in ability and endurance.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::str::FromStr;

use statrs::distribution::{ChiSquared, ContinuousCDF};

use super::{mean_sd, AnalysisError, Result, SkillSample};
use crate::decompose::{LatentMoments, SkillEstimates};
use crate::regress::{self, DesignMatrix, RatioEstimate};

pub const ABILITY: &str = "ability";
pub const ENDURANCE: &str = "endurance";
pub const SCORE: &str = "score";

pub const MIN_RETURNS_N: usize = 100;
pub const MIN_DECILE_N: usize = 1_000;
pub const MIN_IV_N: usize = 500;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ReturnsSpec {
    /// Outcome on the standardized test score.
    ScoreOnly,
    /// Outcome on standardized ability and endurance.
    Skills,
}

impl ReturnsSpec {
    pub fn label(&self) -> &'static str {
        match self {
            ReturnsSpec::ScoreOnly => "score_only",
            ReturnsSpec::Skills => "skills",
        }
    }
}

impl fmt::Display for ReturnsSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for ReturnsSpec {
    type Err = AnalysisError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "score_only" => Ok(ReturnsSpec::ScoreOnly),
            "skills" => Ok(ReturnsSpec::Skills),
            _ => Err(AnalysisError::Unknown {
                kind: "returns spec",
                value: s.to_string(),
            }),
        }
    }
}

/// What "one SD" of each skill means.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SkillScale {
    /// The sample SD of the (noisy) regressor.
    Sample,
    /// A supplied SD, e.g. the noise-corrected latent SD.
    Fixed { sd_alpha: f64, sd_beta: f64 },
}

impl SkillScale {
    /// Latent SDs with the sampling noise removed.
    pub fn latent(m: &LatentMoments) -> Self {
        SkillScale::Fixed {
            sd_alpha: m.sd_alpha_latent,
            sd_beta: m.sd_beta_latent,
        }
    }

    /// SD of the component that persists across two sittings,
    /// `sqrt(Cov(x_t, x_{t-1}))`: sampling noise and sitting-specific
    /// shocks are independent across sittings and drop out.
    pub fn persistent(current: &SkillEstimates, previous: &SkillEstimates) -> Result<Self> {
        let prev = previous.by_id();
        let (mut a0, mut a1, mut b0, mut b1) = (vec![], vec![], vec![], vec![]);
        for r in &current.rows {
            if let Some(p) = prev.get(&r.student_id) {
                a0.push(p.alpha_hat);
                a1.push(r.alpha_hat);
                b0.push(p.beta_hat);
                b1.push(r.beta_hat);
            }
        }
        if a0.len() < 3 {
            return Err(AnalysisError::TooFewMatched {
                found: a0.len(),
                needed: 3,
            });
        }
        let sd_alpha = covariance(&a0, &a1).max(0.0).sqrt();
        let sd_beta = covariance(&b0, &b1).max(0.0).sqrt();
        if sd_alpha <= 0.0 || sd_beta <= 0.0 {
            return Err(AnalysisError::InvalidScale(sd_alpha, sd_beta));
        }
        Ok(SkillScale::Fixed { sd_alpha, sd_beta })
    }
}

fn covariance(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum::<f64>() / (n - 1.0)
}

fn standardize(x: &[f64], sd: Option<f64>) -> Vec<f64> {
    let (m, s) = mean_sd(x);
    let s = sd.unwrap_or(s);
    x.iter().map(|v| (v - m) / s).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Coefficient {
    pub label: String,
    pub estimate: f64,
    pub se: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReturnsResult {
    pub outcome_label: String,
    /// `ols` or `iv`.
    pub estimator: &'static str,
    pub spec: ReturnsSpec,
    /// `score`, or `ability` and `endurance`; per one SD.
    pub coefficients: Vec<Coefficient>,
    /// `endurance / ability`.
    pub ratio: Option<RatioEstimate>,
    pub controls_used: Vec<String>,
    pub n: usize,
    pub r_squared: f64,
    /// First-stage partial F per endogenous skill (IV only).
    pub first_stage_f: Vec<f64>,
}

impl ReturnsResult {
    pub fn get(&self, label: &str) -> Option<&Coefficient> {
        self.coefficients.iter().find(|c| c.label == label)
    }

    /// Estimate for `label`, `NaN` if absent.
    pub fn psi(&self, label: &str) -> f64 {
        self.get(label).map_or(f64::NAN, |c| c.estimate)
    }

    /// Any first-stage F below 10.
    pub fn weak_instruments(&self) -> bool {
        self.first_stage_f.iter().any(|f| *f < 10.0)
    }
}

fn skill_columns(sample: &SkillSample, spec: ReturnsSpec, scale: SkillScale) -> Result<Vec<(String, Vec<f64>)>> {
    Ok(match spec {
        ReturnsSpec::ScoreOnly => vec![(SCORE.to_string(), standardize(&sample.score, None))],
        ReturnsSpec::Skills => {
            let (sa, sb) = match scale {
                SkillScale::Sample => (None, None),
                SkillScale::Fixed { sd_alpha, sd_beta } => {
                    if !(sd_alpha > 0.0 && sd_beta > 0.0) {
                        return Err(AnalysisError::InvalidScale(sd_alpha, sd_beta));
                    }
                    (Some(sd_alpha), Some(sd_beta))
                }
            };
            vec![
                (ABILITY.to_string(), standardize(&sample.alpha, sa)),
                (ENDURANCE.to_string(), standardize(&sample.beta, sb)),
            ]
        }
    })
}

fn controls_design(sample: &SkillSample) -> Vec<(String, Vec<f64>)> {
    sample.controls.clone()
}

/// OLS of the outcome on standardized skills (or score) and controls, with
/// heteroskedasticity-robust SEs (each student is their own cluster).
pub fn returns_ols(sample: &SkillSample, spec: ReturnsSpec, scale: SkillScale) -> Result<ReturnsResult> {
    if sample.len() < MIN_RETURNS_N {
        return Err(AnalysisError::TooFewMatched {
            found: sample.len(),
            needed: MIN_RETURNS_N,
        });
    }
    let skills = skill_columns(sample, spec, scale)?;
    fit_returns(sample, spec, skills)
}

fn fit_returns(sample: &SkillSample, spec: ReturnsSpec, skills: Vec<(String, Vec<f64>)>) -> Result<ReturnsResult> {
    let labels: Vec<String> = skills.iter().map(|(l, _)| l.clone()).collect();
    let mut cols = skills;
    cols.extend(controls_design(sample));
    let x = DesignMatrix::from_columns(cols)?.with_intercept()?;
    let fit = regress::ols_fit(&x, &sample.outcome, sample.weights.as_deref())?;
    let ids: Vec<usize> = (0..sample.len()).collect();
    let fit = fit.with_cluster_se(&x, &ids)?;
    let ratio = match spec {
        ReturnsSpec::Skills => regress::delta_ratio(&fit, ENDURANCE, ABILITY, &fit.cov()).ok(),
        ReturnsSpec::ScoreOnly => None,
    };
    Ok(ReturnsResult {
        outcome_label: sample.outcome_label.clone(),
        estimator: "ols",
        spec,
        coefficients: labels
            .iter()
            .map(|l| {
                Ok(Coefficient {
                    label: l.clone(),
                    estimate: fit.coef(l)?,
                    se: fit.se(l)?,
                })
            })
            .collect::<Result<_>>()?,
        ratio,
        controls_used: sample.controls.iter().map(|(l, _)| l.clone()).collect(),
        n: sample.len(),
        r_squared: fit.r_squared,
        first_stage_f: Vec::new(),
    })
}

/// Deciles 1..=10 by value, ties broken by student id.
pub fn deciles(values: &[f64], ids: &[u64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&i, &j| values[i].total_cmp(&values[j]).then(ids[i].cmp(&ids[j])));
    let n = values.len();
    let mut out = vec![0; n];
    for (rank, &i) in order.iter().enumerate() {
        out[i] = rank * 10 / n + 1;
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecileEffect {
    pub skill: String,
    /// 2..=10 (decile 1 is the omitted category).
    pub decile: usize,
    pub estimate: f64,
    pub se: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecileReturns {
    pub outcome_label: String,
    pub spec: ReturnsSpec,
    pub effects: Vec<DecileEffect>,
    pub n: usize,
}

impl DecileReturns {
    /// Top-vs-bottom decile effect for `skill`.
    pub fn top(&self, skill: &str) -> Option<&DecileEffect> {
        self.effects.iter().find(|e| e.skill == skill && e.decile == 10)
    }
}

/// Outcome on decile indicators of each skill (bottom decile omitted),
/// jointly for ability and endurance or for the score alone.
pub fn returns_decile(sample: &SkillSample, spec: ReturnsSpec) -> Result<DecileReturns> {
    if sample.len() < MIN_DECILE_N {
        return Err(AnalysisError::TooFewMatched {
            found: sample.len(),
            needed: MIN_DECILE_N,
        });
    }
    let skills: Vec<(&str, &[f64])> = match spec {
        ReturnsSpec::ScoreOnly => vec![(SCORE, &sample.score)],
        ReturnsSpec::Skills => vec![(ABILITY, &sample.alpha), (ENDURANCE, &sample.beta)],
    };
    let mut cols = Vec::new();
    for (name, values) in &skills {
        let d = deciles(values, &sample.student_ids);
        for k in 2..=10 {
            cols.push((format!("{name}_d{k}"), d.iter().map(|&v| (v == k) as u8 as f64).collect()));
        }
    }
    cols.extend(controls_design(sample));
    let x = DesignMatrix::from_columns(cols)?.with_intercept()?;
    let ids: Vec<usize> = (0..sample.len()).collect();
    let fit = regress::ols_fit(&x, &sample.outcome, sample.weights.as_deref())?.with_cluster_se(&x, &ids)?;
    let mut effects = Vec::new();
    for (name, _) in &skills {
        for k in 2..=10 {
            let label = format!("{name}_d{k}");
            effects.push(DecileEffect {
                skill: name.to_string(),
                decile: k,
                estimate: fit.coef(&label)?,
                se: fit.se(&label)?,
            });
        }
    }
    Ok(DecileReturns {
        outcome_label: sample.outcome_label.clone(),
        spec,
        effects,
        n: sample.len(),
    })
}

/// Two-stage least squares: this sitting's standardized skills are
/// instrumented with the previous sitting's estimates, whose sampling
/// errors are independent. Students without a previous estimate are
/// dropped. SEs are heteroskedasticity-robust.
pub fn returns_iv(sample: &SkillSample, previous: &SkillEstimates, scale: SkillScale) -> Result<ReturnsResult> {
    let prev = previous.by_id();
    let keep: Vec<bool> = sample.student_ids.iter().map(|id| prev.contains_key(id)).collect();
    let matched = sample.subset(&keep);
    if matched.len() < MIN_IV_N {
        return Err(AnalysisError::TooFewMatched {
            found: matched.len(),
            needed: MIN_IV_N,
        });
    }
    let skills = skill_columns(&matched, ReturnsSpec::Skills, scale)?;
    let endog = DesignMatrix::from_columns(skills)?;
    let z_alpha: Vec<f64> = matched.student_ids.iter().map(|id| prev[id].alpha_hat).collect();
    let z_beta: Vec<f64> = matched.student_ids.iter().map(|id| prev[id].beta_hat).collect();
    let z = DesignMatrix::from_columns(vec![
        ("ability_prev", standardize(&z_alpha, None)),
        ("endurance_prev", standardize(&z_beta, None)),
    ])?;
    let exog = if matched.controls.is_empty() {
        DesignMatrix::from_columns(vec![(regress::INTERCEPT, vec![1.0; matched.len()])])?
    } else {
        DesignMatrix::from_columns(controls_design(&matched))?.with_intercept()?
    };
    let ids: Vec<usize> = (0..matched.len()).collect();
    let tsls = regress::tsls_fit(&matched.outcome, &endog, Some(&exog), &z)?.with_cluster_se(&ids)?;
    let fit = &tsls.fit;
    let ratio = regress::delta_ratio(fit, ENDURANCE, ABILITY, &fit.cov()).ok();
    Ok(ReturnsResult {
        outcome_label: matched.outcome_label.clone(),
        estimator: "iv",
        spec: ReturnsSpec::Skills,
        coefficients: [ABILITY, ENDURANCE]
            .iter()
            .map(|l| {
                Ok(Coefficient {
                    label: l.to_string(),
                    estimate: fit.coef(l)?,
                    se: fit.se(l)?,
                })
            })
            .collect::<Result<_>>()?,
        ratio,
        controls_used: matched.controls.iter().map(|(l, _)| l.clone()).collect(),
        n: matched.len(),
        r_squared: fit.r_squared,
        first_stage_f: tsls.first_stage_f.clone(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupReturnRow {
    pub group: u32,
    pub n: usize,
    pub mean_outcome: f64,
    /// Rank of the group's mean outcome among retained groups, in [0, 1].
    pub outcome_percentile: f64,
    pub psi_a: f64,
    pub se_a: f64,
    pub psi_e: f64,
    pub se_e: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupReturns {
    pub rows: Vec<GroupReturnRow>,
    /// Groups below `min_n`, with their sizes.
    pub skipped: Vec<(u32, usize)>,
    /// Precision-weighted slope of the endurance return on the outcome
    /// percentile, and its SE.
    pub slope_psi_e: (f64, f64),
    /// Heterogeneity test of the endurance returns: statistic, degrees of
    /// freedom, p-value.
    pub overdispersion: (f64, usize, f64),
}

/// Returns estimated separately within each group (degree, occupation,
/// industry). Skills are standardized once on the full sample so group
/// coefficients share a scale.
pub fn group_returns(
    sample: &SkillSample,
    group_of: &HashMap<u64, u32>,
    min_n: usize,
    scale: SkillScale,
) -> Result<GroupReturns> {
    let skills = skill_columns(sample, ReturnsSpec::Skills, scale)?;
    let mut members: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (i, id) in sample.student_ids.iter().enumerate() {
        if let Some(&g) = group_of.get(id) {
            members.entry(g).or_default().push(i);
        }
    }
    let mut fits = Vec::new();
    let mut skipped = Vec::new();
    for (g, idx) in members {
        if idx.len() < min_n.max(MIN_RETURNS_N) {
            skipped.push((g, idx.len()));
            continue;
        }
        let mut keep = vec![false; sample.len()];
        idx.iter().for_each(|&i| keep[i] = true);
        let sub = sample.subset(&keep);
        let sub_skills = skills
            .iter()
            .map(|(l, v)| (l.clone(), v.iter().zip(&keep).filter(|(_, k)| **k).map(|(x, _)| *x).collect()))
            .collect();
        let r = fit_returns(&sub, ReturnsSpec::Skills, sub_skills)?;
        let mean = sub.outcome.iter().sum::<f64>() / sub.len() as f64;
        let (a, e) = (r.get(ABILITY).unwrap().clone(), r.get(ENDURANCE).unwrap().clone());
        fits.push(GroupReturnRow {
            group: g,
            n: sub.len(),
            mean_outcome: mean,
            outcome_percentile: 0.0,
            psi_a: a.estimate,
            se_a: a.se,
            psi_e: e.estimate,
            se_e: e.se,
        });
    }
    if fits.is_empty() {
        return Err(AnalysisError::TooFewMatched {
            found: 0,
            needed: min_n,
        });
    }
    let mut order: Vec<usize> = (0..fits.len()).collect();
    order.sort_by(|&i, &j| fits[i].mean_outcome.total_cmp(&fits[j].mean_outcome).then(fits[i].group.cmp(&fits[j].group)));
    let denom = (fits.len() - 1).max(1) as f64;
    for (rank, &i) in order.iter().enumerate() {
        fits[i].outcome_percentile = rank as f64 / denom;
    }

    let slope_psi_e = if fits.len() >= 3 {
        let x = DesignMatrix::from_columns(vec![("percentile", fits.iter().map(|r| r.outcome_percentile).collect())])?
            .with_intercept()?;
        let y: Vec<f64> = fits.iter().map(|r| r.psi_e).collect();
        let w: Vec<f64> = fits.iter().map(|r| 1.0 / (r.se_e * r.se_e)).collect();
        let f = regress::ols_fit(&x, &y, Some(&w))?;
        (f.coef("percentile")?, f.se("percentile")?)
    } else {
        (f64::NAN, f64::NAN)
    };

    let w: Vec<f64> = fits.iter().map(|r| 1.0 / (r.se_e * r.se_e)).collect();
    let pooled = fits.iter().zip(&w).map(|(r, w)| r.psi_e * w).sum::<f64>() / w.iter().sum::<f64>();
    let stat: f64 = fits.iter().zip(&w).map(|(r, w)| (r.psi_e - pooled).powi(2) * w).sum();
    let df = fits.len() - 1;
    let p = if df > 0 {
        ChiSquared::new(df as f64).map(|d| 1.0 - d.cdf(stat)).unwrap_or(f64::NAN)
    } else {
        f64::NAN
    };
    Ok(GroupReturns {
        rows: fits,
        skipped,
        slope_psi_e,
        overdispersion: (stat, df, p),
    })
}
