//! Mean cognitive endurance from booklet randomization.
//!
//! Student responses are aggregated into question-by-booklet cells. Two
//! designs estimate how the fraction correct changes over a testing day:
//! question fixed effects ([`mean_endurance_fe`]) and a control for
//! position-adjusted difficulty ([`mean_endurance_diffadj`]). Both are
//! weighted by cell size (which reproduces the student-level regression)
//! and cluster standard errors by question. Coefficients are per day:
//! positions enter as `pos_norm` in `[0, 1]`.

use std::collections::{BTreeMap, HashMap};

use rayon::prelude::*;
use thiserror::Error;

use crate::difficulty::DifficultyTable;
use crate::regress::{self, DesignMatrix, FitResult, RegressError};
use crate::synth::{pos_norm, ExamDesign, QuestionId, ResponseMatrix};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PositionError {
    #[error("no responses to aggregate")]
    Empty,
    #[error("no within-question position variation{0}")]
    NoWithinVariation(String),
    #[error("difficulty table has no entry for question {0}")]
    MissingDifficulty(QuestionId),
    #[error("no booklet pairs with differing positions")]
    NoPairs,
    #[error(transparent)]
    Regress(#[from] RegressError),
}

pub type Result<T> = std::result::Result<T, PositionError>;

/// One question-by-booklet cell.
#[derive(Debug, Clone, PartialEq)]
pub struct PanelRow {
    pub question: QuestionId,
    /// 0-based booklet index.
    pub booklet: u8,
    pub fraction_correct: f64,
    pub position: u16,
    pub pos_norm: f64,
    pub n_students: usize,
    pub n_correct: usize,
    pub n_answered: usize,
    pub subject: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BookletPanel {
    pub rows: Vec<PanelRow>,
    pub questions_per_day: usize,
}

impl BookletPanel {
    pub fn n_questions(&self) -> usize {
        let mut qs: Vec<QuestionId> = self.rows.iter().map(|r| r.question).collect();
        qs.sort_unstable();
        qs.dedup();
        qs.len()
    }

    pub fn n_booklets(&self) -> usize {
        let mut bs: Vec<u8> = self.rows.iter().map(|r| r.booklet).collect();
        bs.sort_unstable();
        bs.dedup();
        bs.len()
    }

    /// Rows grouped by question, in question order.
    pub fn by_question(&self) -> BTreeMap<QuestionId, Vec<&PanelRow>> {
        let mut out: BTreeMap<QuestionId, Vec<&PanelRow>> = BTreeMap::new();
        for r in &self.rows {
            out.entry(r.question).or_default().push(r);
        }
        out
    }

    pub fn filtered(&self, keep: impl Fn(&PanelRow) -> bool) -> Self {
        Self {
            rows: self.rows.iter().filter(|r| keep(r)).cloned().collect(),
            questions_per_day: self.questions_per_day,
        }
    }
}

/// Exact cell means over all students; unanswered counts as incorrect.
pub fn build_booklet_panel(responses: &ResponseMatrix, design: &ExamDesign) -> Result<BookletPanel> {
    build_booklet_panel_where(responses, design, |_| true)
}

/// As [`build_booklet_panel`], restricted to students for which `keep`
/// (called with the row index) is true.
pub fn build_booklet_panel_where(
    responses: &ResponseMatrix,
    design: &ExamDesign,
    keep: impl Fn(usize) -> bool + Sync,
) -> Result<BookletPanel> {
    let nq = responses.n_questions();
    if responses.n_students() == 0 || nq == 0 {
        return Err(PositionError::Empty);
    }
    let nb = design.booklets;
    // [count, correct, answered, position] per (question, booklet)
    let zero = || vec![[0u64; 4]; nq * nb];
    let counts = (0..responses.n_students())
        .into_par_iter()
        .filter(|&i| keep(i))
        .fold(zero, |mut acc, i| {
            for (q, c) in responses.student(i).iter().enumerate() {
                if !c.present() {
                    continue;
                }
                let slot = &mut acc[q * nb + c.booklet as usize];
                slot[0] += 1;
                slot[1] += u64::from(c.correct());
                slot[2] += u64::from(c.answered());
                slot[3] = c.position as u64;
            }
            acc
        })
        .reduce(zero, |mut a, b| {
            for (x, y) in a.iter_mut().zip(&b) {
                x[0] += y[0];
                x[1] += y[1];
                x[2] += y[2];
                x[3] = x[3].max(y[3]);
            }
            a
        });
    let qpd = responses.questions_per_day;
    let rows: Vec<PanelRow> = (0..nq)
        .flat_map(|q| (0..nb).map(move |b| (q, b)))
        .filter_map(|(q, b)| {
            let [n, k, a, p] = counts[q * nb + b];
            (n > 0).then(|| PanelRow {
                question: q,
                booklet: b as u8,
                fraction_correct: k as f64 / n as f64,
                position: p as u16,
                pos_norm: pos_norm(p as u16, qpd),
                n_students: n as usize,
                n_correct: k as usize,
                n_answered: a as usize,
                subject: design.subject_of[q].clone(),
            })
        })
        .collect();
    if rows.is_empty() {
        return Err(PositionError::Empty);
    }
    Ok(BookletPanel {
        rows,
        questions_per_day: qpd,
    })
}

/// Which research design produced an [`EnduranceEstimate`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EnduranceDesign {
    FixedEffects,
    DifficultyAdjusted,
    Pairwise,
}

impl EnduranceDesign {
    pub fn label(&self) -> &'static str {
        match self {
            EnduranceDesign::FixedEffects => "fe",
            EnduranceDesign::DifficultyAdjusted => "difficulty_adjusted",
            EnduranceDesign::Pairwise => "pairwise",
        }
    }
}

/// Change in the fraction correct over a full testing day.
#[derive(Debug, Clone, PartialEq)]
pub struct EnduranceEstimate {
    pub beta_daily: f64,
    pub se: f64,
    pub n_questions: usize,
    pub n_cells: usize,
    pub design_label: EnduranceDesign,
    pub r_squared: f64,
}

impl EnduranceEstimate {
    /// Effect of moving a question one position later.
    pub fn per_position(&self, questions_per_day: usize) -> f64 {
        self.beta_daily / (questions_per_day as f64 - 1.0)
    }
}

fn attach_question_clusters(fit: FitResult, x: &DesignMatrix, questions: &[QuestionId]) -> Result<FitResult> {
    match fit.clone().with_cluster_se(x, questions) {
        Ok(f) => Ok(f),
        // One question left: fall back to model-based errors.
        Err(RegressError::SingleCluster) => Ok(fit),
        Err(e) => Err(e.into()),
    }
}

/// Question fixed effects, cell-size weights, question-clustered SE.
pub fn mean_endurance_fe(panel: &BookletPanel) -> Result<EnduranceEstimate> {
    let rows: Vec<&PanelRow> = panel.rows.iter().filter(|r| r.n_students > 0).collect();
    if rows.is_empty() {
        return Err(PositionError::Empty);
    }
    let x = DesignMatrix::from_columns(vec![("pos_norm", rows.iter().map(|r| r.pos_norm).collect())])?;
    let y: Vec<f64> = rows.iter().map(|r| r.fraction_correct).collect();
    let w: Vec<f64> = rows.iter().map(|r| r.n_students as f64).collect();
    let q: Vec<QuestionId> = rows.iter().map(|r| r.question).collect();
    let (xd, yd) = regress::absorb_fixed_effects_weighted(&x, &y, &q, Some(&w))?;
    if xd.values().iter().all(|v| v.abs() < 1e-12) {
        return Err(PositionError::NoWithinVariation(String::new()));
    }
    let groups = regress::count_groups(&q);
    let fit = regress::ols_fit(&xd, &yd, Some(&w))?.with_absorbed_df(groups);
    let fit = attach_question_clusters(fit, &xd, &q)?;
    Ok(EnduranceEstimate {
        beta_daily: fit.coefficients[0],
        se: fit.se("pos_norm")?,
        n_questions: groups,
        n_cells: rows.len(),
        design_label: EnduranceDesign::FixedEffects,
        r_squared: fit.r_squared,
    })
}

/// Regression of cell fractions on `pos_norm` and demeaned difficulty.
pub fn mean_endurance_diffadj(panel: &BookletPanel, difficulty: &DifficultyTable) -> Result<EnduranceEstimate> {
    mean_endurance_diffadj_stacked(&[(panel, difficulty)])
}

/// Difficulty-adjusted design over several panels, each paired with the
/// difficulty table it should be controlled with (cross-fitting pairs a
/// student subsample with difficulty estimated on the complement).
/// Difficulty is demeaned within each table.
pub fn mean_endurance_diffadj_stacked(parts: &[(&BookletPanel, &DifficultyTable)]) -> Result<EnduranceEstimate> {
    let mut pos = Vec::new();
    let mut diff = Vec::new();
    let mut y = Vec::new();
    let mut w = Vec::new();
    let mut q = Vec::new();
    for (panel, table) in parts {
        let lookup: HashMap<QuestionId, f64> = table.rows.iter().map(|r| (r.question, r.difficulty)).collect();
        let mean = table.rows.iter().map(|r| r.difficulty).sum::<f64>() / table.rows.len().max(1) as f64;
        for r in panel.rows.iter().filter(|r| r.n_students > 0) {
            let d = *lookup.get(&r.question).ok_or(PositionError::MissingDifficulty(r.question))?;
            pos.push(r.pos_norm);
            diff.push(d - mean);
            y.push(r.fraction_correct);
            w.push(r.n_students as f64);
            q.push(r.question);
        }
    }
    if y.is_empty() {
        return Err(PositionError::Empty);
    }
    let x = DesignMatrix::from_columns(vec![("pos_norm", pos), ("difficulty", diff)])?.with_intercept()?;
    let fit = regress::ols_fit(&x, &y, Some(&w))?;
    let fit = attach_question_clusters(fit, &x, &q)?;
    Ok(EnduranceEstimate {
        beta_daily: fit.coef("pos_norm")?,
        se: fit.se("pos_norm")?,
        n_questions: regress::count_groups(&q),
        n_cells: y.len(),
        design_label: EnduranceDesign::DifficultyAdjusted,
        r_squared: fit.r_squared,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairDeltaRow {
    pub delta_position: u16,
    pub mean_delta_fraction: f64,
    pub n_pairs: usize,
}

/// Pairwise-booklet comparison table and its fitted line.
#[derive(Debug, Clone, PartialEq)]
pub struct PairDeltas {
    pub table: Vec<PairDeltaRow>,
    pub slope_per_position: f64,
    pub se_slope: f64,
    pub intercept: f64,
    pub se_intercept: f64,
    pub n_pairs: usize,
    pub questions_per_day: usize,
}

impl PairDeltas {
    pub fn beta_daily(&self) -> f64 {
        self.slope_per_position * (self.questions_per_day as f64 - 1.0)
    }

    pub fn as_estimate(&self, n_questions: usize) -> EnduranceEstimate {
        let scale = self.questions_per_day as f64 - 1.0;
        EnduranceEstimate {
            beta_daily: self.beta_daily(),
            se: self.se_slope * scale,
            n_questions,
            n_cells: self.n_pairs,
            design_label: EnduranceDesign::Pairwise,
            r_squared: f64::NAN,
        }
    }
}

/// For every question and unordered booklet pair, the change in fraction
/// correct when the question moves from the earlier to the later position.
///
/// The line is fitted on the pairs themselves, with standard errors
/// clustered by question. Students are dealt to booklets separately each
/// day, so each day's booklet groups differ slightly in ability and that
/// difference is shared by every question. The fit absorbs it with signed
/// group indicators (+1 for the later booklet, −1 for the earlier one).
/// The table reports the raw differences.
pub fn booklet_pair_deltas(panel: &BookletPanel) -> Result<PairDeltas> {
    let qpd = panel.questions_per_day;
    let mut dpos = Vec::new();
    let mut dfrac = Vec::new();
    let mut qids = Vec::new();
    // (day, later booklet, earlier booklet)
    let mut groups = Vec::new();
    for (q, rows) in panel.by_question() {
        let mut rows: Vec<&PanelRow> = rows.into_iter().filter(|r| r.n_students > 0).collect();
        rows.sort_by_key(|r| (r.position, r.booklet));
        for i in 0..rows.len() {
            for j in i + 1..rows.len() {
                dpos.push((rows[j].position - rows[i].position) as f64);
                dfrac.push(rows[j].fraction_correct - rows[i].fraction_correct);
                qids.push(q);
                groups.push((q / qpd, rows[j].booklet, rows[i].booklet));
            }
        }
    }
    if dpos.iter().all(|&d| d == 0.0) {
        return Err(PositionError::NoPairs);
    }
    let mut agg: BTreeMap<u16, (f64, usize)> = BTreeMap::new();
    for (d, f) in dpos.iter().zip(&dfrac) {
        let e = agg.entry(*d as u16).or_insert((0.0, 0));
        e.0 += f;
        e.1 += 1;
    }
    let table = agg
        .into_iter()
        .map(|(d, (s, n))| PairDeltaRow {
            delta_position: d,
            mean_delta_fraction: s / n as f64,
            n_pairs: n,
        })
        .collect();
    let n_pairs = dpos.len();
    let base = DesignMatrix::from_columns(vec![("delta_position", dpos)])?.with_intercept()?;
    let indicators = group_indicators(&groups);
    let (x, fit) = match DesignMatrix::from_columns(indicators).and_then(|g| base.hstack(&g)) {
        Ok(x) => match regress::ols_fit(&x, &dfrac, None) {
            Ok(fit) => (x, fit),
            Err(_) => (base.clone(), regress::ols_fit(&base, &dfrac, None)?),
        },
        // No booklet group beyond each day's reference.
        Err(_) => (base.clone(), regress::ols_fit(&base, &dfrac, None)?),
    };
    let fit = attach_question_clusters(fit, &x, &qids)?;
    Ok(PairDeltas {
        table,
        slope_per_position: fit.coef("delta_position")?,
        se_slope: fit.se("delta_position")?,
        intercept: fit.coef(regress::INTERCEPT)?,
        se_intercept: fit.se(regress::INTERCEPT)?,
        n_pairs,
        questions_per_day: panel.questions_per_day,
    })
}

/// One signed indicator per (day, booklet), leaving out each day's lowest
/// booklet.
fn group_indicators(groups: &[(usize, u8, u8)]) -> Vec<(String, Vec<f64>)> {
    let mut keys: BTreeMap<usize, Vec<u8>> = BTreeMap::new();
    for &(d, later, earlier) in groups {
        let e = keys.entry(d).or_default();
        e.push(later);
        e.push(earlier);
    }
    let mut cols = Vec::new();
    for (day, mut bs) in keys {
        bs.sort_unstable();
        bs.dedup();
        for &b in bs.iter().skip(1) {
            let col = groups
                .iter()
                .map(|&(d, later, earlier)| {
                    if d != day {
                        0.0
                    } else {
                        f64::from(u8::from(later == b)) - f64::from(u8::from(earlier == b))
                    }
                })
                .collect();
            cols.push((format!("day{}_booklet{}", day + 1, b + 1), col));
        }
    }
    cols
}

/// Runs [`mean_endurance_fe`] separately on each label of a cell partition.
/// Cells mapped to `None` are dropped.
pub fn subgroup_position_effects(
    panel: &BookletPanel,
    partition: impl Fn(&PanelRow) -> Option<String>,
) -> BTreeMap<String, Result<EnduranceEstimate>> {
    let mut groups: BTreeMap<String, Vec<PanelRow>> = BTreeMap::new();
    for r in &panel.rows {
        if let Some(label) = partition(r) {
            groups.entry(label).or_default().push(r.clone());
        }
    }
    groups
        .into_iter()
        .map(|(label, rows)| {
            let sub = BookletPanel {
                rows,
                questions_per_day: panel.questions_per_day,
            };
            let est = mean_endurance_fe(&sub).map_err(|e| match e {
                PositionError::NoWithinVariation(_) => PositionError::NoWithinVariation(format!(" for `{label}`")),
                other => other,
            });
            (label, est)
        })
        .collect()
}

/// Median split of questions by position-adjusted difficulty: `easier`
/// (difficulty at or above the median, i.e. higher expected fraction
/// correct) and `harder`.
pub fn partition_by_difficulty(table: &DifficultyTable) -> HashMap<QuestionId, String> {
    let values: Vec<f64> = table.rows.iter().map(|r| r.difficulty).collect();
    let m = median(&values);
    table
        .rows
        .iter()
        .map(|r| {
            let label = if r.difficulty >= m { "easier" } else { "harder" };
            (r.question, label.to_string())
        })
        .collect()
}

/// Median split of questions by word count: `short` / `long`.
pub fn partition_by_length(design: &ExamDesign) -> HashMap<QuestionId, String> {
    let values: Vec<f64> = design.length_words.iter().map(|&w| w as f64).collect();
    let m = median(&values);
    values
        .iter()
        .enumerate()
        .map(|(q, &w)| (q, if w <= m { "short" } else { "long" }.to_string()))
        .collect()
}

/// Cells in the first or second half of the testing day.
pub fn day_half(row: &PanelRow) -> Option<String> {
    let half = if row.pos_norm <= 0.5 { "first_half" } else { "second_half" };
    Some(half.to_string())
}

pub(crate) fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NonresponseRow {
    /// 0-based day.
    pub day: usize,
    pub position: u16,
    pub n: usize,
    pub fraction_unanswered: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NonresponseFit {
    pub day: usize,
    pub intercept: f64,
    pub slope_per_position: f64,
    pub se_slope: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NonresponseTable {
    pub rows: Vec<NonresponseRow>,
    pub fits: Vec<NonresponseFit>,
}

/// Share of blank responses at each position of each day, with a linear
/// fit per day.
pub fn nonresponse_by_position(responses: &ResponseMatrix) -> Result<NonresponseTable> {
    let qpd = responses.questions_per_day;
    let days = responses.days;
    let zero = || vec![[0u64; 2]; days * (qpd + 1)];
    let counts = (0..responses.n_students())
        .into_par_iter()
        .fold(zero, |mut acc, i| {
            for (q, c) in responses.student(i).iter().enumerate() {
                if c.present() {
                    let slot = &mut acc[responses.day_of(q) * (qpd + 1) + c.position as usize];
                    slot[0] += 1;
                    slot[1] += u64::from(!c.answered());
                }
            }
            acc
        })
        .reduce(zero, |mut a, b| {
            for (x, y) in a.iter_mut().zip(&b) {
                x[0] += y[0];
                x[1] += y[1];
            }
            a
        });
    let mut rows = Vec::new();
    for day in 0..days {
        for p in 1..=qpd {
            let [n, blank] = counts[day * (qpd + 1) + p];
            if n > 0 {
                rows.push(NonresponseRow {
                    day,
                    position: p as u16,
                    n: n as usize,
                    fraction_unanswered: blank as f64 / n as f64,
                });
            }
        }
    }
    if rows.is_empty() {
        return Err(PositionError::Empty);
    }
    let mut fits = Vec::new();
    for day in 0..days {
        let sub: Vec<&NonresponseRow> = rows.iter().filter(|r| r.day == day).collect();
        if sub.len() < 3 {
            continue;
        }
        let x = DesignMatrix::from_columns(vec![("position", sub.iter().map(|r| r.position as f64).collect())])?
            .with_intercept()?;
        let y: Vec<f64> = sub.iter().map(|r| r.fraction_unanswered).collect();
        let fit = regress::ols_fit(&x, &y, None)?;
        fits.push(NonresponseFit {
            day,
            intercept: fit.coef(regress::INTERCEPT)?,
            slope_per_position: fit.coef("position")?,
            se_slope: fit.se("position")?,
        });
    }
    Ok(NonresponseTable { rows, fits })
}

/// Mean fraction correct at each (day, position) across booklet cells,
/// weighted by cell size.
pub fn position_profile(panel: &BookletPanel, design: &ExamDesign) -> Vec<(usize, u16, f64)> {
    let mut acc: BTreeMap<(usize, u16), (f64, f64)> = BTreeMap::new();
    for r in &panel.rows {
        let e = acc.entry((design.day_of(r.question), r.position)).or_insert((0.0, 0.0));
        e.0 += r.fraction_correct * r.n_students as f64;
        e.1 += r.n_students as f64;
    }
    acc.into_iter().map(|((d, p), (s, n))| (d, p, s / n)).collect()
}
