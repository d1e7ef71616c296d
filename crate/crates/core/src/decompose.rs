//! Per-student decomposition of a test score into fatigue-adjusted ability
//! (`alpha`, predicted performance at the first position on an average
//! question) and endurance (`beta`, the change in performance over a full
//! testing day).
//!
//! Each student gets their own regression of the correct-answer indicator
//! on `pos_norm` and demeaned question difficulty. With the default
//! per-booklet demeaning the fraction correct decomposes exactly as
//! `alpha + beta * mean_posnorm`.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use thiserror::Error;

use crate::difficulty::{CrossFitDifficulty, DifficultyTable};
use crate::regress::{self, DesignMatrix, RegressError};
use crate::synth::{Cell, ExamDesign, ResponseMatrix};

pub const MIN_ITEMS: usize = 10;
pub const MIN_DISTINCT_POSITIONS: usize = 3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DecomposeError {
    #[error("{found} items answered, at least {MIN_ITEMS} needed")]
    TooFewItems { found: usize },
    #[error("{found} distinct positions, at least {MIN_DISTINCT_POSITIONS} needed")]
    TooFewPositions { found: usize },
    #[error("positions do not vary")]
    ZeroPositionVariance,
    #[error("no difficulty for question {0}")]
    MissingDifficulty(usize),
    #[error("only {0} students matched across sittings, at least 30 needed")]
    TooFewMatched(usize),
    #[error("estimates are no more dispersed than their sampling noise")]
    DegenerateVariance,
    #[error("unknown {kind} `{value}`")]
    Unknown { kind: &'static str, value: String },
    #[error(transparent)]
    Regress(#[from] RegressError),
}

impl DecomposeError {
    /// Short code written to `excluded.csv`.
    pub fn reason_code(&self) -> &'static str {
        match self {
            DecomposeError::TooFewItems { .. } => "too_few_items",
            DecomposeError::TooFewPositions { .. } => "too_few_positions",
            DecomposeError::ZeroPositionVariance => "zero_position_variance",
            DecomposeError::MissingDifficulty(_) => "missing_difficulty",
            DecomposeError::Regress(RegressError::RankDeficient { .. }) => "rank_deficient",
            _ => "fit_failed",
        }
    }
}

pub type Result<T> = std::result::Result<T, DecomposeError>;

/// Regression specification for the per-student fit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub enum Spec {
    /// Intercept, `pos_norm`, difficulty.
    #[default]
    Baseline,
    /// One intercept per testing day; `alpha` is their item-share average.
    DayFe,
    /// One intercept per subject; `alpha` is their item-share average.
    SubjectFe,
    /// Baseline fitted separately per day, coefficients averaged by item share.
    PerDayAvg,
    /// Baseline fitted separately per subject, coefficients averaged by item share.
    PerSubjectAvg,
    /// Baseline `alpha`/`delta`, with `beta` replaced by corr(pos_norm, correct).
    Correlation,
}

impl Spec {
    pub const ALL: [Spec; 6] = [
        Spec::Baseline,
        Spec::DayFe,
        Spec::SubjectFe,
        Spec::PerDayAvg,
        Spec::PerSubjectAvg,
        Spec::Correlation,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Spec::Baseline => "baseline",
            Spec::DayFe => "day_fe",
            Spec::SubjectFe => "subject_fe",
            Spec::PerDayAvg => "per_day_avg",
            Spec::PerSubjectAvg => "per_subject_avg",
            Spec::Correlation => "correlation",
        }
    }

    /// Whether fraction correct equals `alpha + beta * mean_posnorm +
    /// delta * mean_difficulty` exactly. Averaged specs mix slopes fitted
    /// at different mean positions, and the correlation spec's `beta` is
    /// not a slope.
    pub fn has_score_identity(&self) -> bool {
        matches!(self, Spec::Baseline | Spec::DayFe | Spec::SubjectFe)
    }
}

impl fmt::Display for Spec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Spec {
    type Err = DecomposeError;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|m| m.as_str() == s).ok_or_else(|| DecomposeError::Unknown {
            kind: "spec",
            value: s.to_string(),
        })
    }
}

/// Where the difficulty control is centred.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Demean {
    /// Over all questions of the difficulty table.
    Global,
    /// Over the items each student actually saw.
    #[default]
    PerBooklet,
}

impl FromStr for Demean {
    type Err = DecomposeError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "global" => Ok(Demean::Global),
            "per_booklet" => Ok(Demean::PerBooklet),
            _ => Err(DecomposeError::Unknown {
                kind: "demean mode",
                value: s.to_string(),
            }),
        }
    }
}

/// Difficulty control per response-matrix row.
#[derive(Debug, Clone, PartialEq, Default)]
pub enum DifficultyInput {
    /// No difficulty regressor; `delta_hat` is 0.
    #[default]
    None,
    /// Same difficulty for everyone, indexed by question.
    Shared(Vec<f64>),
    /// Out-of-sample difficulty: row `i` uses `tables[fold_of_row[i]]`.
    CrossFit {
        tables: [Vec<f64>; 2],
        fold_of_row: Vec<usize>,
    },
}

impl DifficultyInput {
    pub fn from_table(table: &DifficultyTable, n_questions: usize) -> Self {
        DifficultyInput::Shared(table.dense(n_questions))
    }

    pub fn from_cross_fit(cf: &CrossFitDifficulty, n_questions: usize) -> Self {
        DifficultyInput::CrossFit {
            tables: [cf.tables[0].dense(n_questions), cf.tables[1].dense(n_questions)],
            fold_of_row: cf.fold_of_row.clone(),
        }
    }

    pub fn for_row(&self, row: usize) -> Option<&[f64]> {
        match self {
            DifficultyInput::None => None,
            DifficultyInput::Shared(d) => Some(d),
            DifficultyInput::CrossFit { tables, fold_of_row } => Some(&tables[fold_of_row[row]]),
        }
    }
}

/// One student's fitted skills.
#[derive(Debug, Clone, PartialEq)]
pub struct SkillRow {
    pub student_id: u64,
    pub alpha_hat: f64,
    pub beta_hat: f64,
    pub delta_hat: f64,
    pub se_alpha: f64,
    pub se_beta: f64,
    pub n_items: usize,
    pub mean_posnorm: f64,
    /// Mean of the demeaned difficulty over the student's items (0 under
    /// per-booklet demeaning).
    pub mean_difficulty: f64,
    pub fraction_correct: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Excluded {
    pub student_id: u64,
    pub reason: DecomposeError,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SkillEstimates {
    pub spec: Spec,
    /// Sorted by student id.
    pub rows: Vec<SkillRow>,
    pub excluded: Vec<Excluded>,
}

impl SkillEstimates {
    pub fn alpha(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.alpha_hat).collect()
    }

    pub fn beta(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.beta_hat).collect()
    }

    pub fn by_id(&self) -> HashMap<u64, &SkillRow> {
        self.rows.iter().map(|r| (r.student_id, r)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct DecomposeOptions {
    pub spec: Spec,
    pub demean: Demean,
}

/// One item as seen by the per-student regression.
#[derive(Debug, Clone, Copy)]
struct Item {
    pos: f64,
    correct: f64,
    difficulty: f64,
    day: usize,
    subject: usize,
}

/// Fits one student's cells (indexed by question id; absent cells are
/// skipped).
pub fn decompose_student(
    student_id: u64,
    cells: &[Cell],
    design: &ExamDesign,
    difficulty: Option<&[f64]>,
    opts: DecomposeOptions,
) -> Result<SkillRow> {
    let subject_index: HashMap<String, usize> = design
        .subjects()
        .into_iter()
        .enumerate()
        .map(|(i, s)| (s, i))
        .collect();
    decompose_with_index(student_id, cells, design, difficulty, opts, &subject_index)
}

fn decompose_with_index(
    student_id: u64,
    cells: &[Cell],
    design: &ExamDesign,
    difficulty: Option<&[f64]>,
    opts: DecomposeOptions,
    subject_index: &HashMap<String, usize>,
) -> Result<SkillRow> {
    let mut items = Vec::with_capacity(cells.len());
    for (q, c) in cells.iter().enumerate() {
        if !c.present() {
            continue;
        }
        let d = match difficulty {
            Some(d) => {
                let v = d.get(q).copied().unwrap_or(f64::NAN);
                if !v.is_finite() {
                    return Err(DecomposeError::MissingDifficulty(q));
                }
                v
            }
            None => 0.0,
        };
        items.push(Item {
            pos: crate::synth::pos_norm(c.position, design.questions_per_day),
            correct: if c.correct() { 1.0 } else { 0.0 },
            difficulty: d,
            day: design.day_of(q),
            subject: subject_index[&design.subject_of[q]],
        });
    }
    check_eligible(&items)?;
    let n = items.len() as f64;
    let centre = match (difficulty, opts.demean) {
        (None, _) => 0.0,
        (Some(_), Demean::PerBooklet) => items.iter().map(|it| it.difficulty).sum::<f64>() / n,
        (Some(d), Demean::Global) => {
            let finite: Vec<f64> = d.iter().copied().filter(|v| v.is_finite()).collect();
            finite.iter().sum::<f64>() / finite.len() as f64
        }
    };
    for it in &mut items {
        it.difficulty -= centre;
    }
    let with_difficulty = difficulty.is_some();
    let coef = match opts.spec {
        Spec::Baseline => fit_pooled(&items, with_difficulty, None)?,
        Spec::DayFe => fit_pooled(&items, with_difficulty, Some(|it: &Item| it.day))?,
        Spec::SubjectFe => fit_pooled(&items, with_difficulty, Some(|it: &Item| it.subject))?,
        Spec::PerDayAvg => fit_averaged(&items, with_difficulty, |it| it.day)?,
        Spec::PerSubjectAvg => fit_averaged(&items, with_difficulty, |it| it.subject)?,
        Spec::Correlation => {
            let mut c = fit_pooled(&items, with_difficulty, None)?;
            let pos: Vec<f64> = items.iter().map(|it| it.pos).collect();
            let y: Vec<f64> = items.iter().map(|it| it.correct).collect();
            let r = pearson(&pos, &y).unwrap_or(0.0);
            c.beta = r;
            c.se_beta = ((1.0 - r * r) / (n - 2.0)).sqrt();
            c
        }
    };
    Ok(SkillRow {
        student_id,
        alpha_hat: coef.alpha,
        beta_hat: coef.beta,
        delta_hat: coef.delta,
        se_alpha: coef.se_alpha,
        se_beta: coef.se_beta,
        n_items: items.len(),
        mean_posnorm: items.iter().map(|it| it.pos).sum::<f64>() / n,
        mean_difficulty: items.iter().map(|it| it.difficulty).sum::<f64>() / n,
        fraction_correct: items.iter().map(|it| it.correct).sum::<f64>() / n,
    })
}

fn check_eligible(items: &[Item]) -> Result<()> {
    if items.len() < MIN_ITEMS {
        return Err(DecomposeError::TooFewItems { found: items.len() });
    }
    let mut pos: Vec<f64> = items.iter().map(|it| it.pos).collect();
    pos.sort_by(f64::total_cmp);
    pos.dedup();
    if pos.len() < MIN_DISTINCT_POSITIONS {
        return Err(DecomposeError::TooFewPositions { found: pos.len() });
    }
    Ok(())
}

#[derive(Debug, Clone, Copy)]
struct Coef {
    alpha: f64,
    beta: f64,
    delta: f64,
    se_alpha: f64,
    se_beta: f64,
}

/// One regression over all items, with either a common intercept or one
/// intercept per group.
fn fit_pooled(items: &[Item], with_difficulty: bool, group: Option<fn(&Item) -> usize>) -> Result<Coef> {
    let n = items.len();
    let mut columns: Vec<(String, Vec<f64>)> = Vec::new();
    let mut shares = Vec::new();
    match group {
        None => {
            columns.push((regress::INTERCEPT.to_string(), vec![1.0; n]));
            shares.push(1.0);
        }
        Some(g) => {
            let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
            for it in items {
                *counts.entry(g(it)).or_default() += 1;
            }
            for (&k, &c) in &counts {
                columns.push((format!("g{k}"), items.iter().map(|it| (g(it) == k) as u8 as f64).collect()));
                shares.push(c as f64 / n as f64);
            }
        }
    }
    let n_intercepts = columns.len();
    columns.push(("pos_norm".into(), items.iter().map(|it| it.pos).collect()));
    if with_difficulty {
        columns.push(("difficulty".into(), items.iter().map(|it| it.difficulty).collect()));
    }
    let x = DesignMatrix::from_columns(columns)?;
    let y: Vec<f64> = items.iter().map(|it| it.correct).collect();
    let fit = regress::ols_fit(&x, &y, None)?;
    let cov = fit.cov_homoskedastic();
    // alpha = s' a over the intercept block
    let alpha: f64 = shares.iter().zip(&fit.coefficients).map(|(s, a)| s * a).sum();
    let mut var_alpha = 0.0;
    for i in 0..n_intercepts {
        for j in 0..n_intercepts {
            var_alpha += shares[i] * shares[j] * cov[(i, j)];
        }
    }
    Ok(Coef {
        alpha,
        beta: fit.coefficients[n_intercepts],
        delta: if with_difficulty { fit.coefficients[n_intercepts + 1] } else { 0.0 },
        se_alpha: var_alpha.max(0.0).sqrt(),
        se_beta: cov[(n_intercepts, n_intercepts)].max(0.0).sqrt(),
    })
}

/// Separate baseline fits per group, averaged with item-share weights.
/// Difficulty is re-centred within each group's items.
fn fit_averaged(items: &[Item], with_difficulty: bool, group: fn(&Item) -> usize) -> Result<Coef> {
    let mut groups: BTreeMap<usize, Vec<Item>> = BTreeMap::new();
    for it in items {
        groups.entry(group(it)).or_default().push(*it);
    }
    let n = items.len() as f64;
    let mut out = Coef {
        alpha: 0.0,
        beta: 0.0,
        delta: 0.0,
        se_alpha: 0.0,
        se_beta: 0.0,
    };
    for sub in groups.values_mut() {
        check_eligible(sub)?;
        let m = sub.iter().map(|it| it.difficulty).sum::<f64>() / sub.len() as f64;
        for it in sub.iter_mut() {
            it.difficulty -= m;
        }
        let c = fit_pooled(sub, with_difficulty, None)?;
        let s = sub.len() as f64 / n;
        out.alpha += s * c.alpha;
        out.beta += s * c.beta;
        out.delta += s * c.delta;
        out.se_alpha += (s * c.se_alpha).powi(2);
        out.se_beta += (s * c.se_beta).powi(2);
    }
    out.se_alpha = out.se_alpha.sqrt();
    out.se_beta = out.se_beta.sqrt();
    Ok(out)
}

/// Pearson correlation; `None` if either series is constant.
pub fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    (sxx > 0.0 && syy > 0.0).then(|| sxy / (sxx * syy).sqrt())
}

/// Fits every student; ineligible students are listed with their reason.
/// Output is sorted by student id and does not depend on thread count.
pub fn decompose_cohort(
    responses: &ResponseMatrix,
    design: &ExamDesign,
    difficulty: &DifficultyInput,
    opts: DecomposeOptions,
) -> SkillEstimates {
    let subject_index: HashMap<String, usize> = design
        .subjects()
        .into_iter()
        .enumerate()
        .map(|(i, s)| (s, i))
        .collect();
    let results: Vec<(u64, Result<SkillRow>)> = (0..responses.n_students())
        .into_par_iter()
        .map(|i| {
            let id = responses.student_ids[i];
            let r = decompose_with_index(id, responses.student(i), design, difficulty.for_row(i), opts, &subject_index);
            (id, r)
        })
        .collect();
    let mut rows = Vec::new();
    let mut excluded = Vec::new();
    for (id, r) in results {
        match r {
            Ok(row) => rows.push(row),
            Err(reason) => excluded.push(Excluded { student_id: id, reason }),
        }
    }
    rows.sort_by_key(|r| r.student_id);
    excluded.sort_by_key(|e| e.student_id);
    SkillEstimates {
        spec: opts.spec,
        rows,
        excluded,
    }
}

/// Intercept and slope of a regression of `correct` on `positions`,
/// written as a weighted sum of deviations from the student's mean.
pub fn closed_form_coefficients(positions: &[f64], correct: &[f64]) -> Result<(f64, f64)> {
    let n = positions.len() as f64;
    let pbar = positions.iter().sum::<f64>() / n;
    let cbar = correct.iter().sum::<f64>() / n;
    let sxx: f64 = positions.iter().map(|p| (p - pbar).powi(2)).sum();
    if !(sxx > 0.0) {
        return Err(DecomposeError::ZeroPositionVariance);
    }
    let beta: f64 = positions
        .iter()
        .zip(correct)
        .map(|(p, c)| (p - pbar) / sxx * (c - cbar))
        .sum();
    Ok((cbar - beta * pbar, beta))
}

/// `alpha + beta * mean_posnorm + delta * mean_difficulty`.
pub fn implied_score(row: &SkillRow) -> f64 {
    row.alpha_hat + row.beta_hat * row.mean_posnorm + row.delta_hat * row.mean_difficulty
}

/// Dispersion of the estimates with the sampling noise removed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LatentMoments {
    pub mean_alpha_hat: f64,
    pub mean_beta_hat: f64,
    pub sd_alpha_hat_raw: f64,
    pub sd_beta_hat_raw: f64,
    pub mean_se2_alpha: f64,
    pub mean_se2_beta: f64,
    pub sd_alpha_latent: f64,
    pub sd_beta_latent: f64,
    /// Noise exceeded the raw variance for at least one skill.
    pub clamped: bool,
}

/// `sd_latent² = max(0, sd_raw² − mean SE²)`; raw variances use `n − 1`.
pub fn latent_moments(est: &SkillEstimates) -> LatentMoments {
    let a = est.alpha();
    let b = est.beta();
    let (ma, va) = mean_var(&a);
    let (mb, vb) = mean_var(&b);
    let n = est.rows.len().max(1) as f64;
    let se2a = est.rows.iter().map(|r| r.se_alpha * r.se_alpha).sum::<f64>() / n;
    let se2b = est.rows.iter().map(|r| r.se_beta * r.se_beta).sum::<f64>() / n;
    LatentMoments {
        mean_alpha_hat: ma,
        mean_beta_hat: mb,
        sd_alpha_hat_raw: va.sqrt(),
        sd_beta_hat_raw: vb.sqrt(),
        mean_se2_alpha: se2a,
        mean_se2_beta: se2b,
        sd_alpha_latent: (va - se2a).max(0.0).sqrt(),
        sd_beta_latent: (vb - se2b).max(0.0).sqrt(),
        clamped: va <= se2a || vb <= se2b,
    }
}

pub(crate) fn mean_var(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    let v = if x.len() > 1 {
        x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (m, v)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShrunkSkills {
    pub student_id: Vec<u64>,
    pub alpha_s: Vec<f64>,
    pub beta_s: Vec<f64>,
}

/// Moves each estimate toward the cohort mean in proportion to its noise:
/// `x_s = ω x̂ + (1 − ω) x̄` with `ω = σ²_latent / (σ²_latent + SE²)`.
pub fn shrink_skill_estimates(est: &SkillEstimates, moments: &LatentMoments) -> Result<ShrunkSkills> {
    let sa2 = moments.sd_alpha_latent.powi(2);
    let sb2 = moments.sd_beta_latent.powi(2);
    if sa2 <= 0.0 || sb2 <= 0.0 {
        return Err(DecomposeError::DegenerateVariance);
    }
    let shrink = |x: f64, se: f64, mean: f64, signal: f64| {
        let w = signal / (signal + se * se);
        w * x + (1.0 - w) * mean
    };
    Ok(ShrunkSkills {
        student_id: est.rows.iter().map(|r| r.student_id).collect(),
        alpha_s: est
            .rows
            .iter()
            .map(|r| shrink(r.alpha_hat, r.se_alpha, moments.mean_alpha_hat, sa2))
            .collect(),
        beta_s: est
            .rows
            .iter()
            .map(|r| shrink(r.beta_hat, r.se_beta, moments.mean_beta_hat, sb2))
            .collect(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReliabilityBin {
    pub skill: &'static str,
    /// 0-based percentile bin of the first-sitting estimate.
    pub bin: usize,
    pub n: usize,
    pub mean_t0: f64,
    pub mean_t1: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Reliability {
    pub r_alpha: f64,
    pub r_beta: f64,
    pub n_matched: usize,
    pub bins: Vec<ReliabilityBin>,
}

pub const RELIABILITY_BINS: usize = 100;

/// Test-retest correlation of the skill estimates of students present in
/// both sittings, plus binned means for plotting.
pub fn retest_reliability(t0: &SkillEstimates, t1: &SkillEstimates) -> Result<Reliability> {
    let later = t1.by_id();
    let pairs: Vec<(&SkillRow, &SkillRow)> = t0
        .rows
        .iter()
        .filter_map(|r| later.get(&r.student_id).map(|s| (r, *s)))
        .collect();
    if pairs.len() < 30 {
        return Err(DecomposeError::TooFewMatched(pairs.len()));
    }
    let series = |f: fn(&SkillRow) -> f64| -> (Vec<f64>, Vec<f64>) {
        pairs.iter().map(|(a, b)| (f(a), f(b))).unzip()
    };
    let (a0, a1) = series(|r| r.alpha_hat);
    let (b0, b1) = series(|r| r.beta_hat);
    let mut bins = binned_means("alpha", &a0, &a1);
    bins.extend(binned_means("beta", &b0, &b1));
    Ok(Reliability {
        r_alpha: pearson(&a0, &a1).unwrap_or(0.0),
        r_beta: pearson(&b0, &b1).unwrap_or(0.0),
        n_matched: pairs.len(),
        bins,
    })
}

fn binned_means(skill: &'static str, x0: &[f64], x1: &[f64]) -> Vec<ReliabilityBin> {
    let mut order: Vec<usize> = (0..x0.len()).collect();
    order.sort_by(|&i, &j| x0[i].total_cmp(&x0[j]).then(i.cmp(&j)));
    let n = order.len();
    let mut acc = vec![(0usize, 0.0, 0.0); RELIABILITY_BINS];
    for (rank, &i) in order.iter().enumerate() {
        let b = rank * RELIABILITY_BINS / n;
        acc[b].0 += 1;
        acc[b].1 += x0[i];
        acc[b].2 += x1[i];
    }
    acc.into_iter()
        .enumerate()
        .filter(|(_, (c, _, _))| *c > 0)
        .map(|(bin, (c, s0, s1))| ReliabilityBin {
            skill,
            bin,
            n: c,
            mean_t0: s0 / c as f64,
            mean_t1: s1 / c as f64,
        })
        .collect()
}

/// Sample restrictions used in robustness checks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SampleFilter {
    /// Drop students in the top or bottom 10% of either skill.
    TrimDeciles,
    /// Drop students in the top or bottom 20% of either skill.
    TrimQuintiles,
    /// Drop students whose performance improves over the day.
    DropPositiveBeta,
}

impl FromStr for SampleFilter {
    type Err = DecomposeError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "trim_deciles" => Ok(SampleFilter::TrimDeciles),
            "trim_quintiles" => Ok(SampleFilter::TrimQuintiles),
            "drop_positive_beta" => Ok(SampleFilter::DropPositiveBeta),
            _ => Err(DecomposeError::Unknown {
                kind: "sample filter",
                value: s.to_string(),
            }),
        }
    }
}

/// Student ids retained by `filter`.
pub fn apply_filter(est: &SkillEstimates, filter: SampleFilter) -> Vec<u64> {
    let trim = |share: f64| {
        let bounds = |x: Vec<f64>| (quantile(&x, share), quantile(&x, 1.0 - share));
        let (alo, ahi) = bounds(est.alpha());
        let (blo, bhi) = bounds(est.beta());
        est.rows
            .iter()
            .filter(|r| r.alpha_hat >= alo && r.alpha_hat <= ahi && r.beta_hat >= blo && r.beta_hat <= bhi)
            .map(|r| r.student_id)
            .collect()
    };
    match filter {
        SampleFilter::TrimDeciles => trim(0.1),
        SampleFilter::TrimQuintiles => trim(0.2),
        SampleFilter::DropPositiveBeta => est.rows.iter().filter(|r| r.beta_hat <= 0.0).map(|r| r.student_id).collect(),
    }
}

/// Linear-interpolation quantile.
pub(crate) fn quantile(x: &[f64], q: f64) -> f64 {
    let mut v = x.to_vec();
    v.sort_by(f64::total_cmp);
    if v.is_empty() {
        return f64::NAN;
    }
    let h = q.clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    v[lo] + (h - lo as f64) * (v[hi] - v[lo])
}
