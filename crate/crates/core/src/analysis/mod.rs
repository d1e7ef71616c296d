//! What the skill estimates are worth downstream: returns to ability and
//! endurance in long-run outcomes, group score gaps and an exam-length
//! reform, and the predictive validity of individual questions.

mod gaps;
mod returns;
mod validity;

pub use gaps::*;
pub use returns::*;
pub use validity::*;

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::decompose::{DecomposeError, SkillEstimates};
use crate::regress::RegressError;
use crate::synth::{LatentPopulation, OutcomePanel};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AnalysisError {
    #[error("{found} matched students, at least {needed} needed")]
    TooFewMatched { found: usize, needed: usize },
    #[error("group `{0}` is empty")]
    EmptyGroup(String),
    #[error("score gap is zero")]
    ZeroGap,
    #[error("reform factor must lie in (0, 1], got {0}")]
    InvalidFactor(f64),
    #[error("no usable question-booklet cells")]
    Empty,
    #[error("no within-question position variation")]
    NoWithinVariation,
    #[error("skill scale must be positive (sd_alpha {0}, sd_beta {1})")]
    InvalidScale(f64, f64),
    #[error("unknown {kind} `{value}`")]
    Unknown { kind: &'static str, value: String },
    #[error(transparent)]
    Regress(#[from] RegressError),
    #[error(transparent)]
    Decompose(#[from] DecomposeError),
}

pub type Result<T> = std::result::Result<T, AnalysisError>;

/// Long-run outcomes available in an [`OutcomePanel`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Outcome {
    LogWage,
    Enrolled,
    CollegeQuality,
}

impl Outcome {
    pub const ALL: [Outcome; 3] = [Outcome::Enrolled, Outcome::CollegeQuality, Outcome::LogWage];

    pub fn label(&self) -> &'static str {
        match self {
            Outcome::LogWage => "log_wage",
            Outcome::Enrolled => "enrolled",
            Outcome::CollegeQuality => "college_quality",
        }
    }

    pub fn values(&self, panel: &OutcomePanel) -> Vec<f64> {
        match self {
            Outcome::LogWage => panel.log_wage.clone(),
            Outcome::Enrolled => panel.enrolled.iter().map(|&e| e as u8 as f64).collect(),
            Outcome::CollegeQuality => panel.college_quality.clone(),
        }
    }
}

impl fmt::Display for Outcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for Outcome {
    type Err = AnalysisError;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|o| o.label() == s).ok_or_else(|| AnalysisError::Unknown {
            kind: "outcome",
            value: s.to_string(),
        })
    }
}

/// Students with both skill estimates and an outcome, sorted by id.
#[derive(Debug, Clone, PartialEq)]
pub struct SkillSample {
    pub student_ids: Vec<u64>,
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    /// Fraction correct.
    pub score: Vec<f64>,
    pub se_alpha: Vec<f64>,
    pub se_beta: Vec<f64>,
    pub outcome: Vec<f64>,
    pub outcome_label: String,
    pub controls: Vec<(String, Vec<f64>)>,
    /// Observation weights for the OLS estimators.
    pub weights: Option<Vec<f64>>,
}

impl SkillSample {
    /// Inner join of estimates and outcomes on student id. Controls are
    /// the panel's covariates when `with_controls` is set.
    pub fn from_estimates(est: &SkillEstimates, panel: &OutcomePanel, outcome: Outcome, with_controls: bool) -> Self {
        let index: HashMap<u64, usize> = panel.student_ids.iter().enumerate().map(|(i, &id)| (id, i)).collect();
        let y = outcome.values(panel);
        let mut s = Self::empty(outcome.label(), panel, with_controls);
        for r in &est.rows {
            if let Some(&i) = index.get(&r.student_id) {
                s.push(r.student_id, r.alpha_hat, r.beta_hat, r.fraction_correct, r.se_alpha, r.se_beta, y[i]);
                s.push_controls(panel, i, with_controls);
            }
        }
        s
    }

    /// Uses the true skills of a simulated population; the score is the
    /// expected fraction correct at mid-day.
    pub fn from_truth(pop: &LatentPopulation, panel: &OutcomePanel, outcome: Outcome, with_controls: bool) -> Self {
        let index: HashMap<u64, usize> = panel.student_ids.iter().enumerate().map(|(i, &id)| (id, i)).collect();
        let y = outcome.values(panel);
        let mut order: Vec<usize> = (0..pop.len()).collect();
        order.sort_by_key(|&i| pop.student_ids[i]);
        let mut s = Self::empty(outcome.label(), panel, with_controls);
        for k in order {
            let id = pop.student_ids[k];
            if let Some(&i) = index.get(&id) {
                let (a, b) = (pop.alpha[k], pop.beta[k]);
                s.push(id, a, b, a + 0.5 * b, 0.0, 0.0, y[i]);
                s.push_controls(panel, i, with_controls);
            }
        }
        s
    }

    fn empty(label: &str, panel: &OutcomePanel, with_controls: bool) -> Self {
        let controls = if with_controls {
            panel.control_labels.iter().map(|l| (l.clone(), Vec::new())).collect()
        } else {
            Vec::new()
        };
        Self {
            student_ids: Vec::new(),
            alpha: Vec::new(),
            beta: Vec::new(),
            score: Vec::new(),
            se_alpha: Vec::new(),
            se_beta: Vec::new(),
            outcome: Vec::new(),
            outcome_label: label.to_string(),
            controls,
            weights: None,
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn push(&mut self, id: u64, a: f64, b: f64, score: f64, sea: f64, seb: f64, y: f64) {
        self.student_ids.push(id);
        self.alpha.push(a);
        self.beta.push(b);
        self.score.push(score);
        self.se_alpha.push(sea);
        self.se_beta.push(seb);
        self.outcome.push(y);
    }

    fn push_controls(&mut self, panel: &OutcomePanel, i: usize, with_controls: bool) {
        if with_controls {
            for (k, (_, col)) in self.controls.iter_mut().enumerate() {
                col.push(panel.controls[k][i]);
            }
        }
    }

    pub fn len(&self) -> usize {
        self.student_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.student_ids.is_empty()
    }

    /// Weights each student by `1 / (SE_alpha² + SE_beta²)`.
    pub fn with_precision_weights(mut self) -> Self {
        self.weights = Some(
            self.se_alpha
                .iter()
                .zip(&self.se_beta)
                .map(|(a, b)| {
                    let v = a * a + b * b;
                    if v > 0.0 { 1.0 / v } else { 0.0 }
                })
                .collect(),
        );
        self
    }

    /// Replaces the skills with externally computed values (for example
    /// shrunk estimates) aligned by student id.
    pub fn with_skills(mut self, ids: &[u64], alpha: &[f64], beta: &[f64]) -> Self {
        let index: HashMap<u64, usize> = ids.iter().enumerate().map(|(i, &id)| (id, i)).collect();
        for (k, id) in self.student_ids.iter().enumerate() {
            if let Some(&i) = index.get(id) {
                self.alpha[k] = alpha[i];
                self.beta[k] = beta[i];
            }
        }
        self
    }

    /// Adds one dummy per group (first group omitted) as controls.
    pub fn with_group_dummies(mut self, prefix: &str, group_of: &HashMap<u64, u32>) -> Self {
        let groups: Vec<u32> = self.student_ids.iter().map(|id| group_of.get(id).copied().unwrap_or(u32::MAX)).collect();
        let mut levels = groups.clone();
        levels.sort_unstable();
        levels.dedup();
        for g in levels.into_iter().skip(1) {
            self.controls
                .push((format!("{prefix}_{g}"), groups.iter().map(|&v| (v == g) as u8 as f64).collect()));
        }
        self
    }

    /// Drops students whose outcome is missing (NaN).
    pub fn with_finite_outcome(self) -> Self {
        let keep: Vec<bool> = self.outcome.iter().map(|y| y.is_finite()).collect();
        self.subset(&keep)
    }

    /// Mean-imputes missing control values and adds a `<label>_missing`
    /// indicator for every control that had any.
    pub fn impute_missing_controls(mut self) -> Self {
        let mut added = Vec::new();
        for (label, col) in &mut self.controls {
            let present: Vec<f64> = col.iter().copied().filter(|v| v.is_finite()).collect();
            if present.len() == col.len() {
                continue;
            }
            let fill = if present.is_empty() { 0.0 } else { present.iter().sum::<f64>() / present.len() as f64 };
            let mut flag = Vec::with_capacity(col.len());
            for v in col.iter_mut() {
                let missing = !v.is_finite();
                flag.push(missing as u8 as f64);
                if missing {
                    *v = fill;
                }
            }
            added.push((format!("{label}_missing"), flag));
        }
        self.controls.extend(added);
        self
    }

    /// Rows where `keep` is true.
    pub fn subset(&self, keep: &[bool]) -> Self {
        let pick = |v: &[f64]| -> Vec<f64> { v.iter().zip(keep).filter(|(_, k)| **k).map(|(x, _)| *x).collect() };
        Self {
            student_ids: self.student_ids.iter().zip(keep).filter(|(_, k)| **k).map(|(x, _)| *x).collect(),
            alpha: pick(&self.alpha),
            beta: pick(&self.beta),
            score: pick(&self.score),
            se_alpha: pick(&self.se_alpha),
            se_beta: pick(&self.se_beta),
            outcome: pick(&self.outcome),
            outcome_label: self.outcome_label.clone(),
            controls: self.controls.iter().map(|(l, v)| (l.clone(), pick(v))).collect(),
            weights: self.weights.as_ref().map(|w| pick(w)),
        }
    }
}

pub(crate) fn mean_sd(x: &[f64]) -> (f64, f64) {
    let (m, v) = crate::decompose::mean_var(x);
    (m, v.sqrt())
}
