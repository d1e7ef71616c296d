//! Position-adjusted question difficulty.
//!
//! Because booklets place the same question at different positions, a raw
//! fraction correct mixes how hard a question is with how late it was
//! seen. Every method here follows the same three steps:
//!
//! 1. average position of the question across booklets, weighted by the
//!    number of students in each booklet;
//! 2. a per-position effect (pooled, per question, shrunk, or per group);
//! 3. `difficulty = fraction_correct_raw − effect × avg_position`.
//!
//! **Sign convention:** `difficulty` is on the scale of an expected
//! fraction correct at the first position, so *higher means easier*.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use thiserror::Error;

use crate::position_effects::{self, BookletPanel, PanelRow, PositionError};
use crate::rng;
use crate::synth::{ExamDesign, QuestionId, ResponseMatrix};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DifficultyError {
    #[error("position adjustment needs at least two booklets, found {0}")]
    InsufficientBooklets(usize),
    #[error("unknown difficulty method `{0}`")]
    MethodUnknown(String),
    #[error("shrinkage needs at least two questions with finite standard errors")]
    TooFewQuestions,
    #[error("standard errors must be non-negative")]
    NegativeSe,
    #[error(transparent)]
    Position(#[from] PositionError),
}

pub type Result<T> = std::result::Result<T, DifficultyError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum DifficultyMethod {
    Raw,
    Pooled,
    ItemSpecific,
    Shrinkage,
    ByMedianSplit,
    BySubject,
}

impl DifficultyMethod {
    pub const ALL: [DifficultyMethod; 6] = [
        DifficultyMethod::Raw,
        DifficultyMethod::Pooled,
        DifficultyMethod::ItemSpecific,
        DifficultyMethod::Shrinkage,
        DifficultyMethod::ByMedianSplit,
        DifficultyMethod::BySubject,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            DifficultyMethod::Raw => "raw",
            DifficultyMethod::Pooled => "pooled",
            DifficultyMethod::ItemSpecific => "item_specific",
            DifficultyMethod::Shrinkage => "shrinkage",
            DifficultyMethod::ByMedianSplit => "by_median_split",
            DifficultyMethod::BySubject => "by_subject",
        }
    }
}

impl fmt::Display for DifficultyMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DifficultyMethod {
    type Err = DifficultyError;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| DifficultyError::MethodUnknown(s.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DifficultyRow {
    pub question: QuestionId,
    pub fraction_correct_raw: f64,
    /// Student-weighted mean of the 1-based positions.
    pub avg_position: f64,
    /// Per-position effect, fraction units.
    pub position_effect_used: f64,
    /// Expected fraction correct at the first position (higher = easier).
    pub difficulty: f64,
    /// The method's own effect was not identified for this question and
    /// the pooled effect was used instead.
    pub fallback: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DifficultyTable {
    pub method: DifficultyMethod,
    pub rows: Vec<DifficultyRow>,
}

impl DifficultyTable {
    pub fn get(&self, question: QuestionId) -> Option<&DifficultyRow> {
        self.rows
            .binary_search_by_key(&question, |r| r.question)
            .ok()
            .map(|i| &self.rows[i])
    }

    pub fn values(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.difficulty).collect()
    }

    /// Difficulty indexed by question id; questions absent from the table
    /// are `NaN`.
    pub fn dense(&self, n_questions: usize) -> Vec<f64> {
        let mut out = vec![f64::NAN; n_questions];
        for r in &self.rows {
            if r.question < n_questions {
                out[r.question] = r.difficulty;
            }
        }
        out
    }
}

/// Aggregates the responses into booklet cells and applies `method`.
pub fn estimate_difficulty(
    responses: &ResponseMatrix,
    design: &ExamDesign,
    method: DifficultyMethod,
) -> Result<DifficultyTable> {
    let panel = position_effects::build_booklet_panel(responses, design)?;
    difficulty_from_panel(&panel, method)
}

struct QuestionSummary {
    question: QuestionId,
    fraction: f64,
    avg_position: f64,
    subject: String,
}

fn summarize(panel: &BookletPanel) -> Vec<QuestionSummary> {
    panel
        .by_question()
        .into_iter()
        .map(|(q, rows)| {
            let n: usize = rows.iter().map(|r| r.n_students).sum();
            let k: usize = rows.iter().map(|r| r.n_correct).sum();
            let pos: f64 = rows.iter().map(|r| r.position as f64 * r.n_students as f64).sum();
            QuestionSummary {
                question: q,
                fraction: k as f64 / n.max(1) as f64,
                avg_position: pos / n.max(1) as f64,
                subject: rows[0].subject.clone(),
            }
        })
        .collect()
}

/// Per-position effect from the question fixed-effects design.
fn pooled_effect(panel: &BookletPanel) -> std::result::Result<f64, PositionError> {
    Ok(position_effects::mean_endurance_fe(panel)?.per_position(panel.questions_per_day))
}

/// Per-question slope of the cell fraction on position, weighted by cell
/// size, with its sampling SE treating each cell mean as binomial.
/// `None` when the question sits at one position in every booklet.
pub fn item_position_effect(rows: &[&PanelRow]) -> Option<(f64, f64)> {
    let n: f64 = rows.iter().map(|r| r.n_students as f64).sum();
    if n == 0.0 {
        return None;
    }
    let pbar = rows.iter().map(|r| r.n_students as f64 * r.position as f64).sum::<f64>() / n;
    let sxx: f64 = rows
        .iter()
        .map(|r| r.n_students as f64 * (r.position as f64 - pbar).powi(2))
        .sum();
    if sxx <= 1e-12 {
        return None;
    }
    let mut slope = 0.0;
    let mut var = 0.0;
    for r in rows {
        let a = r.n_students as f64 * (r.position as f64 - pbar) / sxx;
        let p = r.fraction_correct;
        slope += a * p;
        if r.n_students > 0 {
            var += a * a * p * (1.0 - p) / r.n_students as f64;
        }
    }
    Some((slope, var.sqrt()))
}

/// Applies a difficulty method to an already aggregated panel.
pub fn difficulty_from_panel(panel: &BookletPanel, method: DifficultyMethod) -> Result<DifficultyTable> {
    let summary = summarize(panel);
    if summary.is_empty() {
        return Err(PositionError::Empty.into());
    }
    if method != DifficultyMethod::Raw && panel.n_booklets() < 2 {
        return Err(DifficultyError::InsufficientBooklets(panel.n_booklets()));
    }

    // (effect, fallback) per question, in summary order
    let effects: Vec<(f64, bool)> = match method {
        DifficultyMethod::Raw => vec![(0.0, false); summary.len()],
        DifficultyMethod::Pooled => {
            let e = pooled_effect(panel)?;
            vec![(e, false); summary.len()]
        }
        DifficultyMethod::ItemSpecific | DifficultyMethod::Shrinkage => {
            let pooled = pooled_effect(panel)?;
            let by_q = panel.by_question();
            let items: Vec<Option<(f64, f64)>> = summary
                .par_iter()
                .map(|s| item_position_effect(&by_q[&s.question]))
                .collect();
            if method == DifficultyMethod::ItemSpecific {
                items.iter().map(|it| it.map_or((pooled, true), |(b, _)| (b, false))).collect()
            } else {
                let betas: Vec<f64> = items.iter().map(|it| it.map_or(pooled, |(b, _)| b)).collect();
                let ses: Vec<f64> = items.iter().map(|it| it.map_or(f64::INFINITY, |(_, s)| s)).collect();
                let shrunk = shrink_position_effects(&betas, &ses)?;
                shrunk.values.into_iter().zip(&items).map(|(v, it)| (v, it.is_none())).collect()
            }
        }
        DifficultyMethod::ByMedianSplit => {
            let fractions: Vec<f64> = summary.iter().map(|s| s.fraction).collect();
            let m = position_effects::median(&fractions);
            let below: HashMap<QuestionId, bool> = summary.iter().map(|s| (s.question, s.fraction < m)).collect();
            let label = |below: bool| if below { "below" } else { "at_or_above" };
            group_effects(panel, &summary, |s| label(below[&s.question]).to_string(), |r| {
                label(below[&r.question]).to_string()
            })?
        }
        DifficultyMethod::BySubject => {
            group_effects(panel, &summary, |s| s.subject.clone(), |r| r.subject.clone())?
        }
    };

    let rows = summary
        .iter()
        .zip(effects)
        .map(|(s, (effect, fallback))| DifficultyRow {
            question: s.question,
            fraction_correct_raw: s.fraction,
            avg_position: s.avg_position,
            position_effect_used: effect,
            difficulty: s.fraction - effect * s.avg_position,
            fallback,
        })
        .collect();
    Ok(DifficultyTable { method, rows })
}

/// Pooled effect estimated separately within each group of questions;
/// groups without position variation fall back to the overall pooled
/// effect.
fn group_effects(
    panel: &BookletPanel,
    summary: &[QuestionSummary],
    label_of_question: impl Fn(&QuestionSummary) -> String,
    label_of_row: impl Fn(&PanelRow) -> String,
) -> Result<Vec<(f64, bool)>> {
    let overall = pooled_effect(panel)?;
    let labels: Vec<String> = summary.iter().map(&label_of_question).collect();
    let mut per_group: BTreeMap<String, Option<f64>> = BTreeMap::new();
    for label in &labels {
        if per_group.contains_key(label) {
            continue;
        }
        let sub = panel.filtered(|r| &label_of_row(r) == label);
        let effect = match pooled_effect(&sub) {
            Ok(e) => Some(e),
            Err(PositionError::NoWithinVariation(_)) => None,
            Err(e) => return Err(e.into()),
        };
        per_group.insert(label.clone(), effect);
    }
    Ok(labels
        .iter()
        .map(|l| per_group[l].map_or((overall, true), |e| (e, false)))
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Shrunk {
    pub values: Vec<f64>,
    /// Weight on each question's own estimate.
    pub weights: Vec<f64>,
    pub grand_mean: f64,
    /// The dispersion of the estimates did not exceed their average
    /// sampling variance; every value was set to the grand mean.
    pub degenerate: bool,
}

/// Empirical-Bayes shrinkage of noisy per-question effects toward their
/// mean. Each estimate keeps weight
/// `ω = (V − E[SE²]) / (V − E[SE²] + SE²)`, clamped to `[0, 1]`, where `V`
/// is the sample variance of the estimates. Infinite SEs get weight 0 and
/// are left out of the moments.
pub fn shrink_position_effects(effects: &[f64], ses: &[f64]) -> Result<Shrunk> {
    if effects.len() != ses.len() {
        return Err(DifficultyError::TooFewQuestions);
    }
    if ses.iter().any(|s| *s < 0.0 || s.is_nan()) {
        return Err(DifficultyError::NegativeSe);
    }
    let finite: Vec<usize> = (0..effects.len()).filter(|&j| ses[j].is_finite()).collect();
    if finite.len() < 2 {
        return Err(DifficultyError::TooFewQuestions);
    }
    let m = finite.len() as f64;
    let grand_mean = finite.iter().map(|&j| effects[j]).sum::<f64>() / m;
    let var = finite.iter().map(|&j| (effects[j] - grand_mean).powi(2)).sum::<f64>() / (m - 1.0);
    let noise = finite.iter().map(|&j| ses[j] * ses[j]).sum::<f64>() / m;
    let signal = var - noise;
    let degenerate = signal <= 0.0;
    let weights: Vec<f64> = ses
        .iter()
        .map(|&se| {
            if degenerate || !se.is_finite() {
                0.0
            } else if se == 0.0 {
                1.0
            } else {
                (signal / (signal + se * se)).clamp(0.0, 1.0)
            }
        })
        .collect();
    let values = effects
        .iter()
        .zip(&weights)
        .map(|(&b, &w)| w * b + (1.0 - w) * grand_mean)
        .collect();
    Ok(Shrunk {
        values,
        weights,
        grand_mean,
        degenerate,
    })
}

/// Two-fold split of students by a hash of their id. Fold membership does
/// not depend on the simulation seed, so it is stable across runs.
pub fn holdout_fold(student_id: u64) -> usize {
    (rng::key(0, &[rng::stream::HOLDOUT, student_id]) & 1) as usize
}

/// Out-of-sample difficulty: `tables[k]` is estimated from the students
/// *outside* fold `k`, and is meant to be used for the students in fold
/// `k`.
#[derive(Debug, Clone, PartialEq)]
pub struct CrossFitDifficulty {
    pub tables: [DifficultyTable; 2],
    /// Fold of each response-matrix row.
    pub fold_of_row: Vec<usize>,
}

impl CrossFitDifficulty {
    pub fn table_for_row(&self, row: usize) -> &DifficultyTable {
        &self.tables[self.fold_of_row[row]]
    }
}

pub fn cross_fit_difficulty(
    responses: &ResponseMatrix,
    design: &ExamDesign,
    method: DifficultyMethod,
) -> Result<CrossFitDifficulty> {
    let fold_of_row: Vec<usize> = responses.student_ids.iter().map(|&id| holdout_fold(id)).collect();
    let table_for = |fold: usize| -> Result<DifficultyTable> {
        let panel = position_effects::build_booklet_panel_where(responses, design, |i| fold_of_row[i] != fold)?;
        difficulty_from_panel(&panel, method)
    };
    Ok(CrossFitDifficulty {
        tables: [table_for(0)?, table_for(1)?],
        fold_of_row,
    })
}

/// The difficulty-adjusted mean position effect with difficulty estimated
/// on the fly. Each part pairs the panel the regression runs on with the
/// panel its difficulty is estimated from (the same panel, or the other
/// fold when cross-fitting).
///
/// The regression's clustered SE treats difficulty as known, but the
/// position-adjusted difficulty carries the noise of its own position
/// effect. The SE reported here is a delete-one-question jackknife that
/// re-estimates the difficulty tables each time.
pub fn diffadj_endurance(
    parts: &[(&BookletPanel, &BookletPanel)],
    method: DifficultyMethod,
) -> Result<position_effects::EnduranceEstimate> {
    let estimate = |drop: Option<QuestionId>| -> Result<position_effects::EnduranceEstimate> {
        let keep = |r: &PanelRow| Some(r.question) != drop;
        let fitted: Vec<(BookletPanel, DifficultyTable)> = parts
            .iter()
            .map(|(panel, source)| Ok((panel.filtered(keep), difficulty_from_panel(&source.filtered(keep), method)?)))
            .collect::<Result<_>>()?;
        let refs: Vec<(&BookletPanel, &DifficultyTable)> = fitted.iter().map(|(p, t)| (p, t)).collect();
        Ok(position_effects::mean_endurance_diffadj_stacked(&refs)?)
    };
    let mut full = estimate(None)?;
    let mut questions: Vec<QuestionId> = parts.iter().flat_map(|(p, _)| p.rows.iter().map(|r| r.question)).collect();
    questions.sort_unstable();
    questions.dedup();
    if questions.len() < 3 {
        return Ok(full);
    }
    let leave_out: Vec<f64> = questions
        .par_iter()
        .map(|&q| estimate(Some(q)).map(|e| e.beta_daily))
        .collect::<Result<_>>()?;
    let g = leave_out.len() as f64;
    let mean = leave_out.iter().sum::<f64>() / g;
    full.se = ((g - 1.0) / g * leave_out.iter().map(|b| (b - mean).powi(2)).sum::<f64>()).sqrt();
    Ok(full)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::pos_norm;

    fn cell(question: QuestionId, booklet: u8, position: u16, frac: f64, n: usize) -> PanelRow {
        PanelRow {
            question,
            booklet,
            fraction_correct: frac,
            position,
            pos_norm: pos_norm(position, 90),
            n_students: n,
            n_correct: (frac * n as f64).round() as usize,
            n_answered: n,
            subject: "math".into(),
        }
    }

    #[test]
    fn method_names_round_trip() {
        for m in DifficultyMethod::ALL {
            assert_eq!(m.as_str().parse::<DifficultyMethod>().unwrap(), m);
        }
        assert_eq!(
            "irt".parse::<DifficultyMethod>(),
            Err(DifficultyError::MethodUnknown("irt".into()))
        );
    }

    #[test]
    fn published_adjustments_for_a_late_question() {
        // Step 3 alone, with the published inputs. The table rounds the
        // effects to 0.01 pp, so allow one rounding unit on the result.
        let step3 = |frac: f64, effect_pp: f64, pos: f64| frac - effect_pp / 100.0 * pos;
        for (effect_pp, expected) in [(0.0, 0.36), (-0.08, 0.41), (-0.24, 0.51), (-0.15, 0.45), (-0.03, 0.37)] {
            assert!((step3(0.36, effect_pp, 64.0) - expected).abs() < 0.01, "{effect_pp}");
        }
    }

    #[test]
    fn constant_position_falls_back_to_pooled() {
        let rows = vec![
            cell(0, 0, 10, 0.6, 100),
            cell(0, 1, 60, 0.5, 100),
            cell(1, 0, 30, 0.4, 100),
            cell(1, 1, 30, 0.45, 100),
        ];
        let panel = BookletPanel { rows, questions_per_day: 90 };
        let t = difficulty_from_panel(&panel, DifficultyMethod::ItemSpecific).unwrap();
        let pooled = difficulty_from_panel(&panel, DifficultyMethod::Pooled).unwrap();
        assert!(!t.rows[0].fallback);
        assert!((t.rows[0].position_effect_used - (-0.1 / 50.0)).abs() < 1e-12);
        assert!(t.rows[1].fallback);
        assert_eq!(t.rows[1].position_effect_used, pooled.rows[1].position_effect_used);
        // Only question 0 moves, so the pooled effect is its slope.
        assert!((pooled.rows[0].position_effect_used - (-0.002)).abs() < 1e-12);
    }

    #[test]
    fn one_booklet_only_supports_raw() {
        let panel = BookletPanel {
            rows: vec![cell(0, 0, 1, 0.5, 10), cell(1, 0, 2, 0.4, 10)],
            questions_per_day: 90,
        };
        assert_eq!(
            difficulty_from_panel(&panel, DifficultyMethod::Pooled),
            Err(DifficultyError::InsufficientBooklets(1))
        );
        let raw = difficulty_from_panel(&panel, DifficultyMethod::Raw).unwrap();
        assert!(raw.rows.iter().all(|r| r.difficulty == r.fraction_correct_raw));
    }

    #[test]
    fn zero_ses_leave_effects_unchanged() {
        let b = [0.1, -0.2, 0.05];
        let s = shrink_position_effects(&b, &[0.0; 3]).unwrap();
        assert_eq!(s.values, b.to_vec());
    }

    #[test]
    fn huge_se_is_fully_shrunk() {
        let b = [0.1, -0.2, 0.05, 0.3];
        let s = shrink_position_effects(&b, &[0.01, 0.01, 0.01, 1e9]).unwrap();
        assert!((s.values[3] - s.grand_mean).abs() < 1e-6);
    }

    #[test]
    fn two_question_hand_computation() {
        // mean 0, sample variance 0.02, E[SE²] = (0.0036 + 0.0064)/2 = 0.005
        let b = [0.1, -0.1];
        let se = [0.06, 0.08];
        let s = shrink_position_effects(&b, &se).unwrap();
        let w0 = 0.015 / (0.015 + 0.0036);
        let w1 = 0.015 / (0.015 + 0.0064);
        assert!((s.weights[0] - w0).abs() < 1e-12);
        assert!((s.weights[1] - w1).abs() < 1e-12);
        assert!((s.values[0] - w0 * 0.1).abs() < 1e-12);
        assert!((s.values[1] + w1 * 0.1).abs() < 1e-12);
    }

    #[test]
    fn noise_dominated_effects_collapse_to_the_mean() {
        let s = shrink_position_effects(&[0.1, -0.1], &[1.0, 1.0]).unwrap();
        assert!(s.degenerate);
        assert!(s.values.iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn jackknife_keeps_the_point_estimate() {
        let mut rows = Vec::new();
        for q in 0..10 {
            for b in 0..3u8 {
                let p = 1 + ((q * 11 + b as usize * 29) % 90) as u16;
                let wobble = 0.004 * ((q * 5 + b as usize * 3) % 7) as f64;
                rows.push(cell(q, b, p, 0.35 + 0.02 * q as f64 - 0.05 * pos_norm(p, 90) + wobble, 400));
            }
        }
        let panel = BookletPanel { rows, questions_per_day: 90 };
        let table = difficulty_from_panel(&panel, DifficultyMethod::Pooled).unwrap();
        let plain = position_effects::mean_endurance_diffadj(&panel, &table).unwrap();
        let jk = diffadj_endurance(&[(&panel, &panel)], DifficultyMethod::Pooled).unwrap();
        assert_eq!(jk.beta_daily, plain.beta_daily);
        assert!(jk.se > 0.0 && jk.se.is_finite());

        // Without noise every leave-one-out fit is the same (huge cells keep
        // the rounding of the correct counts negligible).
        let exact = BookletPanel {
            rows: panel
                .rows
                .iter()
                .map(|r| {
                    let f = 0.35 + 0.02 * r.question as f64 - 0.05 * r.pos_norm;
                    cell(r.question, r.booklet, r.position, f, 1_000_000_000)
                })
                .collect(),
            questions_per_day: 90,
        };
        let jk = diffadj_endurance(&[(&exact, &exact)], DifficultyMethod::Pooled).unwrap();
        assert!((jk.beta_daily + 0.05).abs() < 1e-7, "{jk:?}");
        assert!(jk.se < 1e-7);
    }
}
