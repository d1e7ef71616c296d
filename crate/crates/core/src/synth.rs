//! Ground-truth simulator for multi-booklet exams.
//!
//! A student's chance of answering a question correctly depends on a
//! fatigue-adjusted ability `alpha`, a per-day endurance slope `beta`
//! applied to the question's normalized position within the day, and the
//! question's difficulty. Booklets permute question order within subject
//! blocks, which is what later identifies the position effect.
//!
//! All draws come from [`crate::rng`] keyed streams, so results do not
//! depend on thread count or iteration order.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::{self, stream};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SynthError {
    #[error("invalid configuration: {0}")]
    ConfigInvalid(String),
    #[error("response model mismatch: {0}")]
    ModelMismatch(String),
    #[error("invalid item parameter: {0}")]
    ParamInvalid(String),
}

pub type Result<T> = std::result::Result<T, SynthError>;

fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(SynthError::ConfigInvalid(msg.into()))
}

/// Global question index, `0..days * questions_per_day`. Day `d` owns the
/// contiguous block `d * questions_per_day ..`.
pub type QuestionId = usize;

/// Normalized position: 0 for the first question of a day, 1 for the last.
#[inline]
pub fn pos_norm(position: u16, questions_per_day: usize) -> f64 {
    (position as f64 - 1.0) / (questions_per_day as f64 - 1.0)
}

// ---------------------------------------------------------------------------
// Exam design
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DesignConfig {
    pub days: usize,
    pub questions_per_day: usize,
    pub booklets: usize,
    /// Subject blocks per day; orderings are shuffled within each block.
    pub subjects_per_day: usize,
    pub min_words: u32,
    pub max_words: u32,
}

impl Default for DesignConfig {
    fn default() -> Self {
        Self {
            days: 2,
            questions_per_day: 90,
            booklets: 4,
            subjects_per_day: 2,
            min_words: 40,
            max_words: 400,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExamDesign {
    pub days: usize,
    pub questions_per_day: usize,
    pub booklets: usize,
    /// `booklet * days + day` -> question ids in the order they are printed.
    orderings: Vec<Vec<QuestionId>>,
    /// `booklet * n_questions + q` -> 1-based position within the day.
    positions: Vec<u16>,
    pub subject_of: Vec<String>,
    pub length_words: Vec<u32>,
}

const SUBJECT_NAMES: [[&str; 2]; 2] = [
    ["natural_science", "human_science"],
    ["language", "math"],
];

fn subject_label(days: usize, subjects: usize, day: usize, block: usize) -> String {
    if days == 2 && subjects == 2 {
        SUBJECT_NAMES[day][block].to_string()
    } else {
        format!("day{}_subject{}", day + 1, block + 1)
    }
}

/// `[start, end)` bounds of the subject blocks of one day.
fn subject_blocks(questions_per_day: usize, subjects: usize) -> Vec<(usize, usize)> {
    (0..subjects)
        .map(|s| {
            (
                s * questions_per_day / subjects,
                (s + 1) * questions_per_day / subjects,
            )
        })
        .collect()
}

impl ExamDesign {
    /// Builds a design from explicit orderings (`orderings[booklet][day]`).
    pub fn from_orderings(
        days: usize,
        questions_per_day: usize,
        orderings: Vec<Vec<Vec<QuestionId>>>,
        subject_of: Vec<String>,
        length_words: Vec<u32>,
    ) -> Result<Self> {
        if days == 0 || questions_per_day < 2 {
            return invalid("a design needs at least one day and two questions per day");
        }
        let booklets = orderings.len();
        if booklets == 0 || booklets > u8::MAX as usize {
            return invalid(format!("booklet count {booklets} outside 1..=255"));
        }
        if questions_per_day > u16::MAX as usize {
            return invalid("too many questions per day");
        }
        let n_questions = days * questions_per_day;
        if subject_of.len() != n_questions || length_words.len() != n_questions {
            return invalid("subject and length tables must cover every question");
        }
        let mut flat = Vec::with_capacity(booklets * days);
        let mut positions = vec![0u16; booklets * n_questions];
        for (b, per_day) in orderings.into_iter().enumerate() {
            if per_day.len() != days {
                return invalid(format!("booklet {} has {} days", b + 1, per_day.len()));
            }
            for (d, order) in per_day.into_iter().enumerate() {
                let range = d * questions_per_day..(d + 1) * questions_per_day;
                if order.len() != questions_per_day {
                    return invalid(format!(
                        "booklet {} day {} lists {} questions, expected {questions_per_day}",
                        b + 1,
                        d + 1,
                        order.len()
                    ));
                }
                for (p, &q) in order.iter().enumerate() {
                    if !range.contains(&q) {
                        return invalid(format!(
                            "booklet {} day {} places question {} from another day",
                            b + 1,
                            d + 1,
                            q + 1
                        ));
                    }
                    if positions[b * n_questions + q] != 0 {
                        return invalid(format!(
                            "booklet {} lists question {} twice",
                            b + 1,
                            q + 1
                        ));
                    }
                    positions[b * n_questions + q] = (p + 1) as u16;
                }
                flat.push(order);
            }
        }
        Ok(Self {
            days,
            questions_per_day,
            booklets,
            orderings: flat,
            positions,
            subject_of,
            length_words,
        })
    }

    pub fn n_questions(&self) -> usize {
        self.days * self.questions_per_day
    }

    pub fn day_of(&self, q: QuestionId) -> usize {
        q / self.questions_per_day
    }

    /// 1-based position of `q` in `booklet` (0-based booklet index).
    pub fn position(&self, booklet: usize, q: QuestionId) -> u16 {
        self.positions[booklet * self.n_questions() + q]
    }

    pub fn pos_norm(&self, booklet: usize, q: QuestionId) -> f64 {
        pos_norm(self.position(booklet, q), self.questions_per_day)
    }

    pub fn ordering(&self, booklet: usize, day: usize) -> &[QuestionId] {
        &self.orderings[booklet * self.days + day]
    }

    pub fn subjects(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for s in &self.subject_of {
            if !out.contains(s) {
                out.push(s.clone());
            }
        }
        out
    }

    /// Largest minus smallest position of `q` across booklets.
    pub fn position_range(&self, q: QuestionId) -> u16 {
        let ps = (0..self.booklets).map(|b| self.position(b, q));
        let (lo, hi) = ps.fold((u16::MAX, 0), |(lo, hi), p| (lo.min(p), hi.max(p)));
        hi - lo
    }
}

/// Booklet 1 prints questions in id order; every other booklet is an
/// independent uniform shuffle within each subject block of each day.
pub fn build_design(config: &DesignConfig, seed: u64) -> Result<ExamDesign> {
    let DesignConfig {
        days,
        questions_per_day: qpd,
        booklets,
        subjects_per_day,
        min_words,
        max_words,
    } = *config;
    if booklets == 0 {
        return invalid("design.booklets must be at least 1");
    }
    if qpd < 3 {
        return invalid("design.questions_per_day must be at least 3");
    }
    if days == 0 {
        return invalid("design.days must be at least 1");
    }
    if subjects_per_day == 0 || subjects_per_day > qpd {
        return invalid("design.subjects_per_day must lie in 1..=questions_per_day");
    }
    if min_words > max_words {
        return invalid("design.min_words exceeds design.max_words");
    }
    let blocks = subject_blocks(qpd, subjects_per_day);
    let mut orderings = Vec::with_capacity(booklets);
    for b in 0..booklets {
        let mut per_day = Vec::with_capacity(days);
        for d in 0..days {
            let mut order: Vec<QuestionId> = (d * qpd..(d + 1) * qpd).collect();
            if b > 0 {
                let mut rng = rng::entity_rng(seed, &[stream::DESIGN, b as u64, d as u64]);
                for &(lo, hi) in &blocks {
                    order[lo..hi].shuffle(&mut rng);
                }
            }
            per_day.push(order);
        }
        orderings.push(per_day);
    }
    let n = days * qpd;
    let mut subject_of = Vec::with_capacity(n);
    let mut length_words = Vec::with_capacity(n);
    for q in 0..n {
        let (d, within) = (q / qpd, q % qpd);
        let block = blocks.iter().position(|&(lo, hi)| (lo..hi).contains(&within)).unwrap();
        subject_of.push(subject_label(days, subjects_per_day, d, block));
        let u = rng::uniform(seed, &[stream::DESIGN, u64::MAX, q as u64]);
        length_words.push(min_words + ((max_words - min_words + 1) as f64 * u) as u32);
    }
    ExamDesign::from_orderings(days, qpd, orderings, subject_of, length_words)
}

// ---------------------------------------------------------------------------
// Latent population
// ---------------------------------------------------------------------------

/// Binary student attribute with additive skill shifts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroupShift {
    pub name: String,
    /// Probability that a student carries the attribute.
    pub share: f64,
    #[serde(default)]
    pub delta_alpha: f64,
    #[serde(default)]
    pub delta_beta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LatentConfig {
    pub mean_alpha: f64,
    pub sd_alpha: f64,
    pub mean_beta: f64,
    pub sd_beta: f64,
    /// Correlation of the underlying bivariate normal.
    pub corr: f64,
    pub alpha_min: f64,
    pub alpha_max: f64,
    pub beta_min: f64,
    pub beta_max: f64,
    /// Generic standard-normal covariates used as regression controls.
    pub n_covariates: usize,
    pub groups: Vec<GroupShift>,
}

impl Default for LatentConfig {
    fn default() -> Self {
        // Mean test score 0.344 with a -0.058 daily decline gives a
        // position-0 mean of 0.373.
        Self {
            mean_alpha: 0.373,
            sd_alpha: 0.132,
            mean_beta: -0.058,
            sd_beta: 0.088,
            corr: 0.0,
            alpha_min: 0.05,
            alpha_max: 0.95,
            beta_min: -0.9,
            beta_max: 0.9,
            n_covariates: 3,
            groups: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatentPopulation {
    pub student_ids: Vec<u64>,
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    pub group_names: Vec<String>,
    /// `group_flags[g][i]`.
    pub group_flags: Vec<Vec<bool>>,
    /// `covariates[k][i]`, standard normal.
    pub covariates: Vec<Vec<f64>>,
    /// Number of alpha/beta values moved by the clamp.
    pub clamp_events: usize,
}

impl LatentPopulation {
    pub fn len(&self) -> usize {
        self.student_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.student_ids.is_empty()
    }

    /// Population with no groups or covariates, ids `0..n`.
    pub fn from_skills(alpha: Vec<f64>, beta: Vec<f64>) -> Self {
        assert_eq!(alpha.len(), beta.len());
        Self {
            student_ids: (0..alpha.len() as u64).collect(),
            alpha,
            beta,
            group_names: Vec::new(),
            group_flags: Vec::new(),
            covariates: Vec::new(),
            clamp_events: 0,
        }
    }

    pub fn group(&self, name: &str) -> Option<&[bool]> {
        let g = self.group_names.iter().position(|n| n == name)?;
        Some(&self.group_flags[g])
    }
}

/// Draws `(alpha, beta)` from a bivariate normal, applies group shifts and
/// clamps to the configured bounds.
///
/// Group shifts are centred (`delta * (flag - share)`), so the configured
/// means stay the population means while the between-group difference is
/// exactly `delta`.
pub fn draw_population(n_students: usize, config: &LatentConfig, seed: u64) -> Result<LatentPopulation> {
    if n_students == 0 {
        return invalid("cohort.n_students must be at least 1");
    }
    let c = config;
    if !(c.sd_alpha >= 0.0 && c.sd_beta >= 0.0) {
        return invalid("latent standard deviations must be nonnegative");
    }
    if !(-1.0..=1.0).contains(&c.corr) {
        return invalid("latent.corr must lie in [-1, 1]");
    }
    if c.alpha_min > c.alpha_max || c.beta_min > c.beta_max {
        return invalid("latent clamp bounds are inverted");
    }
    for g in &c.groups {
        if !(0.0..=1.0).contains(&g.share) {
            return invalid(format!("group `{}` share must lie in [0, 1]", g.name));
        }
    }
    let k = c.n_covariates;
    let ng = c.groups.len();
    let rows: Vec<(f64, f64, Vec<bool>, Vec<f64>, usize)> = (0..n_students as u64)
        .into_par_iter()
        .map(|id| {
            let mut rng = rng::entity_rng(seed, &[stream::LATENT, id]);
            let z1: f64 = StandardNormal.sample(&mut rng);
            let z2: f64 = StandardNormal.sample(&mut rng);
            let mut alpha = c.mean_alpha + c.sd_alpha * z1;
            let mut beta =
                c.mean_beta + c.sd_beta * (c.corr * z1 + (1.0 - c.corr * c.corr).sqrt() * z2);
            let mut flags = Vec::with_capacity(ng);
            for g in &c.groups {
                let on = rng.random::<f64>() < g.share;
                let centred = if on { 1.0 - g.share } else { -g.share };
                alpha += g.delta_alpha * centred;
                beta += g.delta_beta * centred;
                flags.push(on);
            }
            let covs: Vec<f64> = (0..k).map(|_| StandardNormal.sample(&mut rng)).collect();
            let mut clamps = 0;
            let ca = alpha.clamp(c.alpha_min, c.alpha_max);
            let cb = beta.clamp(c.beta_min, c.beta_max);
            clamps += usize::from(ca != alpha) + usize::from(cb != beta);
            (ca, cb, flags, covs, clamps)
        })
        .collect();
    let mut pop = LatentPopulation {
        student_ids: (0..n_students as u64).collect(),
        alpha: Vec::with_capacity(n_students),
        beta: Vec::with_capacity(n_students),
        group_names: c.groups.iter().map(|g| g.name.clone()).collect(),
        group_flags: vec![Vec::with_capacity(n_students); ng],
        covariates: vec![Vec::with_capacity(n_students); k],
        clamp_events: 0,
    };
    for (a, b, flags, covs, clamps) in rows {
        pop.alpha.push(a);
        pop.beta.push(b);
        for (g, f) in flags.into_iter().enumerate() {
            pop.group_flags[g].push(f);
        }
        for (j, v) in covs.into_iter().enumerate() {
            pop.covariates[j].push(v);
        }
        pop.clamp_events += clamps;
    }
    Ok(pop)
}

// ---------------------------------------------------------------------------
// Responses
// ---------------------------------------------------------------------------

/// One student's record for one question.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash)]
pub struct Cell {
    /// 1-based position within the day.
    pub position: u16,
    /// 0-based booklet index.
    pub booklet: u8,
    flags: u8,
}

const PRESENT: u8 = 1;
const ANSWERED: u8 = 2;
const CORRECT: u8 = 4;

impl Cell {
    /// A correct response is always an answered one.
    pub fn new(booklet: u8, position: u16, answered: bool, correct: bool) -> Self {
        let mut flags = PRESENT;
        if answered {
            flags |= ANSWERED;
            if correct {
                flags |= CORRECT;
            }
        }
        Self {
            position,
            booklet,
            flags,
        }
    }

    pub fn present(&self) -> bool {
        self.flags & PRESENT != 0
    }

    pub fn answered(&self) -> bool {
        self.flags & ANSWERED != 0
    }

    pub fn correct(&self) -> bool {
        self.flags & CORRECT != 0
    }
}

/// Dense student-by-question response store.
#[derive(Debug, Clone, PartialEq)]
pub struct ResponseMatrix {
    pub student_ids: Vec<u64>,
    pub days: usize,
    pub questions_per_day: usize,
    cells: Vec<Cell>,
    /// Cells whose linear-model probability was clamped into `[0, 1]`.
    pub clamp_events: u64,
}

impl ResponseMatrix {
    /// Matrix with every cell absent; fill it with [`ResponseMatrix::set`].
    pub fn empty(student_ids: Vec<u64>, days: usize, questions_per_day: usize) -> Self {
        let cells = vec![Cell::default(); student_ids.len() * days * questions_per_day];
        Self {
            student_ids,
            days,
            questions_per_day,
            cells,
            clamp_events: 0,
        }
    }

    pub fn n_students(&self) -> usize {
        self.student_ids.len()
    }

    pub fn n_questions(&self) -> usize {
        self.days * self.questions_per_day
    }

    pub fn day_of(&self, q: QuestionId) -> usize {
        q / self.questions_per_day
    }

    pub fn set(&mut self, student: usize, q: QuestionId, cell: Cell) {
        let nq = self.n_questions();
        self.cells[student * nq + q] = cell;
    }

    pub fn cell(&self, student: usize, q: QuestionId) -> Cell {
        self.cells[student * self.n_questions() + q]
    }

    /// All cells of one student, indexed by question id.
    pub fn student(&self, student: usize) -> &[Cell] {
        let nq = self.n_questions();
        &self.cells[student * nq..(student + 1) * nq]
    }

    pub fn pos_norm(&self, cell: &Cell) -> f64 {
        pos_norm(cell.position, self.questions_per_day)
    }

    /// Booklet the student sat on `day`, if any cell of that day is present.
    pub fn booklet_of(&self, student: usize, day: usize) -> Option<u8> {
        let qpd = self.questions_per_day;
        self.student(student)[day * qpd..(day + 1) * qpd]
            .iter()
            .find(|c| c.present())
            .map(|c| c.booklet)
    }

    /// Fraction correct over present cells (unanswered counts as incorrect).
    pub fn fraction_correct(&self, student: usize) -> f64 {
        let (n, k) = self
            .student(student)
            .iter()
            .filter(|c| c.present())
            .fold((0usize, 0usize), |(n, k), c| (n + 1, k + usize::from(c.correct())));
        if n == 0 {
            0.0
        } else {
            k as f64 / n as f64
        }
    }

    pub fn index_of(&self, student_id: u64) -> Option<usize> {
        self.student_ids.iter().position(|&s| s == student_id)
    }
}

/// 3PL item parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ItemParams {
    pub a: f64,
    pub b: f64,
    pub c: f64,
}

/// `c + (1 - c) / (1 + exp(-a (theta - b)))`.
pub fn three_pl_prob(theta: f64, a: f64, b: f64, c: f64) -> Result<f64> {
    if !(a > 0.0 && a.is_finite()) {
        return Err(SynthError::ParamInvalid(format!("discrimination a = {a} must be positive")));
    }
    if !(0.0..1.0).contains(&c) {
        return Err(SynthError::ParamInvalid(format!("guessing c = {c} must lie in [0, 1)")));
    }
    let x = a * (theta - b);
    let logistic = if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    };
    Ok(c + (1.0 - c) * logistic)
}

/// How latent skills translate into a probability of answering correctly.
#[derive(Debug, Clone, PartialEq)]
pub enum ResponseModel {
    /// `clamp01(alpha + beta * m_j * pos_norm + loading * difficulty_j)`.
    Linear { difficulty_loading: f64 },
    /// 3PL on `theta = scale * (alpha + beta * m_j * pos_norm - center)`.
    ThreePl {
        items: Vec<ItemParams>,
        scale: f64,
        center: f64,
    },
}

impl Default for ResponseModel {
    fn default() -> Self {
        ResponseModel::Linear {
            difficulty_loading: 1.0,
        }
    }
}

/// Probability of leaving a question blank: `logistic(intercept + slope * pos_norm)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NonresponseConfig {
    pub intercept: f64,
    pub slope: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ResponseConfig {
    pub model: ResponseModel,
    pub nonresponse: Option<NonresponseConfig>,
    /// Per-question multiplier `m_j` on the endurance slope (default 1).
    pub beta_multiplier: Option<Vec<f64>>,
}

/// Mean-zero normal difficulties with standard deviation `sd`.
pub fn draw_item_difficulty(n_questions: usize, sd: f64, seed: u64) -> Vec<f64> {
    let mut d: Vec<f64> = (0..n_questions as u64)
        .map(|q| {
            let mut rng = rng::entity_rng(seed, &[stream::DIFFICULTY, q]);
            { let z: f64 = StandardNormal.sample(&mut rng); sd * z }
        })
        .collect();
    let mean = d.iter().sum::<f64>() / n_questions.max(1) as f64;
    d.iter_mut().for_each(|v| *v -= mean);
    d
}

/// 3PL parameters with `a ~ U[0.8, 2.0]`, `b ~ b_mean + b_sd * N(0,1)` and a
/// common guessing floor.
pub fn draw_item_params(n_questions: usize, b_mean: f64, b_sd: f64, guess: f64, seed: u64) -> Vec<ItemParams> {
    (0..n_questions as u64)
        .map(|q| {
            let mut rng = rng::entity_rng(seed, &[stream::DIFFICULTY, q, 3]);
            let a = 0.8 + 1.2 * rng.random::<f64>();
            let z: f64 = StandardNormal.sample(&mut rng);
            ItemParams {
                a,
                b: b_mean + b_sd * z,
                c: guess,
            }
        })
        .collect()
}

/// Balanced random booklet assignment for one day: students are ranked by a
/// keyed hash and dealt round-robin, so counts differ by at most one.
pub fn assign_booklets(student_ids: &[u64], booklets: usize, day: usize, seed: u64) -> Vec<u8> {
    let mut order: Vec<(u64, usize)> = student_ids
        .iter()
        .enumerate()
        .map(|(i, &id)| (rng::key(seed, &[stream::BOOKLET, day as u64, id]), i))
        .collect();
    order.sort_unstable();
    let mut out = vec![0u8; student_ids.len()];
    for (rank, &(_, i)) in order.iter().enumerate() {
        out[i] = (rank % booklets) as u8;
    }
    out
}

fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Simulates one sitting of the exam for every student in `population`.
pub fn simulate_responses(
    design: &ExamDesign,
    population: &LatentPopulation,
    difficulty_true: &[f64],
    config: &ResponseConfig,
    seed: u64,
) -> Result<ResponseMatrix> {
    let nq = design.n_questions();
    if difficulty_true.len() != nq {
        return invalid(format!(
            "{} difficulties for {nq} questions",
            difficulty_true.len()
        ));
    }
    if let Some(m) = &config.beta_multiplier {
        if m.len() != nq {
            return invalid("beta_multiplier must have one entry per question");
        }
    }
    match &config.model {
        ResponseModel::Linear { .. } => {
            let mean = difficulty_true.iter().sum::<f64>() / nq as f64;
            if mean.abs() > 1e-9 {
                return invalid(format!("linear-model difficulties must be mean zero (mean {mean:e})"));
            }
        }
        ResponseModel::ThreePl { items, scale, .. } => {
            if items.is_empty() {
                return Err(SynthError::ModelMismatch(
                    "three_pl requested without item parameters".into(),
                ));
            }
            if items.len() != nq {
                return Err(SynthError::ModelMismatch(format!(
                    "{} item parameter sets for {nq} questions",
                    items.len()
                )));
            }
            if !(*scale > 0.0) {
                return invalid("three_pl scale must be positive");
            }
            for (q, it) in items.iter().enumerate() {
                three_pl_prob(0.0, it.a, it.b, it.c)
                    .map_err(|e| SynthError::ParamInvalid(format!("question {}: {e}", q + 1)))?;
            }
        }
    }

    let booklets: Vec<Vec<u8>> = (0..design.days)
        .map(|d| assign_booklets(&population.student_ids, design.booklets, d, seed))
        .collect();
    let mut out = ResponseMatrix::empty(population.student_ids.clone(), design.days, design.questions_per_day);
    let qpd = design.questions_per_day;
    let clamps: u64 = out
        .cells
        .par_chunks_mut(nq)
        .enumerate()
        .map(|(i, row)| {
            let id = population.student_ids[i];
            let (alpha, beta) = (population.alpha[i], population.beta[i]);
            let mut clamps = 0u64;
            for (q, cell) in row.iter_mut().enumerate() {
                let b = booklets[q / qpd][i];
                let position = design.position(b as usize, q);
                let pn = pos_norm(position, qpd);
                let m = config.beta_multiplier.as_ref().map_or(1.0, |m| m[q]);
                let p = match &config.model {
                    ResponseModel::Linear { difficulty_loading } => {
                        let raw = alpha + beta * m * pn + difficulty_loading * difficulty_true[q];
                        if !(0.0..=1.0).contains(&raw) {
                            clamps += 1;
                        }
                        raw.clamp(0.0, 1.0)
                    }
                    ResponseModel::ThreePl { items, scale, center } => {
                        let theta = scale * (alpha + beta * m * pn - center);
                        let it = items[q];
                        three_pl_prob(theta, it.a, it.b, it.c).expect("validated above")
                    }
                };
                let answered = match config.nonresponse {
                    Some(nr) => {
                        rng::uniform(seed, &[stream::NONRESPONSE, id, q as u64])
                            >= logistic(nr.intercept + nr.slope * pn)
                    }
                    None => true,
                };
                let correct = answered && rng::uniform(seed, &[stream::RESPONSE, id, q as u64]) < p;
                *cell = Cell::new(b, position, answered, correct);
            }
            clamps
        })
        .sum();
    out.clamp_events = clamps;
    Ok(out)
}

// ---------------------------------------------------------------------------
// Outcomes
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutcomeConfig {
    pub intercept: f64,
    /// Log-wage return to a one-SD increase in ability.
    pub psi_a: f64,
    /// Log-wage return to a one-SD increase in endurance.
    pub psi_e: f64,
    /// Coefficients on the population covariates (missing entries are 0).
    pub lambda: Vec<f64>,
    pub sigma_wage: f64,
    /// Enrollment when `index + Logistic(0, enroll_noise) > enroll_threshold`.
    pub enroll_threshold: f64,
    pub enroll_noise: f64,
    pub quality_noise: f64,
    pub n_employers: u32,
    pub n_occupations: u32,
    pub n_degrees: u32,
    pub n_industries: u32,
    /// Weight of the standardized skill index in the sorting key for
    /// employer/occupation/degree/industry; 0 assigns groups at random.
    pub sorting: f64,
    /// Occupation `o` of `K` earns `psi_e * (1 + gradient * o / (K - 1))`.
    pub psi_e_occupation_gradient: f64,
}

impl Default for OutcomeConfig {
    fn default() -> Self {
        Self {
            intercept: 2.0,
            psi_a: 0.154,
            psi_e: 0.054,
            lambda: vec![0.05, -0.03, 0.02],
            sigma_wage: 0.5,
            enroll_threshold: 0.0,
            enroll_noise: 0.15,
            quality_noise: 0.2,
            n_employers: 200,
            n_occupations: 20,
            n_degrees: 15,
            n_industries: 10,
            sorting: 0.7,
            psi_e_occupation_gradient: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OutcomePanel {
    pub student_ids: Vec<u64>,
    pub log_wage: Vec<f64>,
    pub enrolled: Vec<bool>,
    pub college_quality: Vec<f64>,
    pub employer_id: Vec<u32>,
    pub occupation_id: Vec<u32>,
    pub degree_id: Vec<u32>,
    pub industry_id: Vec<u32>,
    pub control_labels: Vec<String>,
    /// `controls[k][i]`.
    pub controls: Vec<Vec<f64>>,
}

fn standardize(v: &[f64]) -> Vec<f64> {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let sd = (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
    if sd > 0.0 {
        v.iter().map(|x| (x - mean) / sd).collect()
    } else {
        vec![0.0; v.len()]
    }
}

/// Quantile buckets of a noisy sorting key, 0 = lowest.
fn sort_into_groups(index_z: &[f64], k: u32, sorting: f64, seed: u64, tag: u64, ids: &[u64]) -> Vec<u32> {
    let noise_w = (1.0 - sorting * sorting).max(0.0).sqrt();
    let mut keyed: Vec<(f64, usize)> = index_z
        .iter()
        .enumerate()
        .map(|(i, z)| {
            let mut rng = rng::entity_rng(seed, &[stream::SORTING, tag, ids[i]]);
            let e: f64 = StandardNormal.sample(&mut rng);
            (sorting * z + noise_w * e, i)
        })
        .collect();
    keyed.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let n = keyed.len();
    let mut out = vec![0u32; n];
    for (rank, &(_, i)) in keyed.iter().enumerate() {
        out[i] = ((rank as u64 * k as u64) / n as u64) as u32;
    }
    out
}

/// Long-run outcomes from a linear index in standardized true skills.
pub fn simulate_outcomes(population: &LatentPopulation, config: &OutcomeConfig, seed: u64) -> Result<OutcomePanel> {
    let n = population.len();
    if n == 0 {
        return invalid("population is empty");
    }
    let c = config;
    if c.sigma_wage < 0.0 || c.enroll_noise <= 0.0 || c.quality_noise < 0.0 {
        return invalid("outcome noise scales must be nonnegative (enroll_noise positive)");
    }
    if !(0.0..=1.0).contains(&c.sorting) {
        return invalid("outcomes.sorting must lie in [0, 1]");
    }
    if c.n_employers == 0 || c.n_occupations == 0 || c.n_degrees == 0 || c.n_industries == 0 {
        return invalid("outcome catalogs must be nonempty");
    }
    if c.lambda.len() > population.covariates.len() {
        return invalid(format!(
            "{} lambda coefficients for {} covariates",
            c.lambda.len(),
            population.covariates.len()
        ));
    }
    let za = standardize(&population.alpha);
    let zb = standardize(&population.beta);
    let control_part: Vec<f64> = (0..n)
        .map(|i| {
            c.lambda
                .iter()
                .zip(&population.covariates)
                .map(|(l, x)| l * x[i])
                .sum()
        })
        .collect();
    let index: Vec<f64> = (0..n)
        .map(|i| c.psi_a * za[i] + c.psi_e * zb[i] + control_part[i])
        .collect();
    let index_z = standardize(&index);
    let ids = &population.student_ids;
    let occupation_id = sort_into_groups(&index_z, c.n_occupations, c.sorting, seed, 1, ids);
    let employer_id = sort_into_groups(&index_z, c.n_employers, c.sorting, seed, 2, ids);
    let degree_id = sort_into_groups(&index_z, c.n_degrees, c.sorting, seed, 3, ids);
    let industry_id = sort_into_groups(&index_z, c.n_industries, c.sorting, seed, 4, ids);

    let mut log_wage = Vec::with_capacity(n);
    let mut enrolled = Vec::with_capacity(n);
    let mut college_quality = Vec::with_capacity(n);
    for i in 0..n {
        let mut rng = rng::entity_rng(seed, &[stream::OUTCOME, ids[i]]);
        let eps: f64 = StandardNormal.sample(&mut rng);
        let grad = if c.n_occupations > 1 {
            c.psi_e_occupation_gradient * occupation_id[i] as f64 / (c.n_occupations - 1) as f64
        } else {
            0.0
        };
        log_wage.push(
            c.intercept + c.psi_a * za[i] + c.psi_e * (1.0 + grad) * zb[i] + control_part[i] + c.sigma_wage * eps,
        );
        let u: f64 = rng.random::<f64>().clamp(1e-12, 1.0 - 1e-12);
        let logistic_noise = c.enroll_noise * (u / (1.0 - u)).ln();
        enrolled.push(index[i] + logistic_noise > c.enroll_threshold);
        let e2: f64 = StandardNormal.sample(&mut rng);
        college_quality.push(index[i] + c.quality_noise * e2);
    }
    Ok(OutcomePanel {
        student_ids: ids.clone(),
        log_wage,
        enrolled,
        college_quality,
        employer_id,
        occupation_id,
        degree_id,
        industry_id,
        control_labels: (0..population.covariates.len()).map(|k| format!("x{}", k + 1)).collect(),
        controls: population.covariates.clone(),
    })
}

// ---------------------------------------------------------------------------
// Retest
// ---------------------------------------------------------------------------

/// Sitting-specific shocks added to the persistent skills.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RetestConfig {
    pub sd_alpha_transient: f64,
    pub sd_beta_transient: f64,
}

impl Default for RetestConfig {
    fn default() -> Self {
        Self {
            sd_alpha_transient: 0.05,
            sd_beta_transient: 0.09,
        }
    }
}

/// Two sittings (previous year, current year) of the same population.
/// Both share the persistent skills; each adds independent transient
/// shocks and draws fresh booklets.
pub fn simulate_retest(
    population: &LatentPopulation,
    design: &ExamDesign,
    difficulty_true: &[f64],
    response: &ResponseConfig,
    retest: &RetestConfig,
    seed: u64,
) -> Result<(ResponseMatrix, ResponseMatrix)> {
    if population.is_empty() {
        return invalid("population is empty");
    }
    if !(retest.sd_alpha_transient >= 0.0 && retest.sd_beta_transient >= 0.0) {
        return invalid("transient standard deviations must be nonnegative");
    }
    let sitting = |s: u64| -> Result<ResponseMatrix> {
        let mut shocked = population.clone();
        for (i, &id) in population.student_ids.iter().enumerate() {
            let mut rng = rng::entity_rng(seed, &[stream::TRANSIENT, s, id]);
            let ea: f64 = StandardNormal.sample(&mut rng);
            let eb: f64 = StandardNormal.sample(&mut rng);
            shocked.alpha[i] += retest.sd_alpha_transient * ea;
            shocked.beta[i] += retest.sd_beta_transient * eb;
        }
        simulate_responses(design, &shocked, difficulty_true, response, rng::key(seed, &[stream::SITTING, s]))
    };
    Ok((sitting(0)?, sitting(1)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_booklet_is_the_identity_design() {
        let cfg = DesignConfig {
            booklets: 1,
            ..Default::default()
        };
        let d = build_design(&cfg, 3).unwrap();
        for q in 0..d.n_questions() {
            assert_eq!(d.position(0, q) as usize, q % d.questions_per_day + 1);
            assert_eq!(d.position_range(q), 0);
        }
    }

    #[test]
    fn design_is_seeded() {
        let cfg = DesignConfig::default();
        let a = build_design(&cfg, 1).unwrap();
        assert_eq!(a, build_design(&cfg, 1).unwrap());
        assert_ne!(a, build_design(&cfg, 2).unwrap());
    }

    #[test]
    fn permutations_respect_subject_blocks() {
        let d = build_design(&DesignConfig::default(), 5).unwrap();
        for b in 0..d.booklets {
            for day in 0..d.days {
                let order = d.ordering(b, day);
                for (p, &q) in order.iter().enumerate() {
                    assert_eq!(d.subject_of[q], d.subject_of[order[(p / 45) * 45]]);
                    assert_eq!(d.position(b, q) as usize, p + 1);
                }
            }
        }
    }

    #[test]
    fn design_config_errors() {
        let bad = DesignConfig {
            questions_per_day: 2,
            ..Default::default()
        };
        assert!(matches!(build_design(&bad, 0), Err(SynthError::ConfigInvalid(_))));
        let bad = DesignConfig {
            booklets: 0,
            ..Default::default()
        };
        assert!(build_design(&bad, 0).is_err());
    }

    #[test]
    fn from_orderings_rejects_duplicates() {
        let err = ExamDesign::from_orderings(
            1,
            3,
            vec![vec![vec![0, 0, 2]]],
            vec!["s".into(); 3],
            vec![10; 3],
        );
        assert!(err.is_err());
    }

    #[test]
    fn degenerate_population() {
        let cfg = LatentConfig {
            sd_alpha: 0.0,
            sd_beta: 0.0,
            ..Default::default()
        };
        let pop = draw_population(50, &cfg, 9).unwrap();
        assert!(pop.alpha.iter().all(|&a| a == cfg.mean_alpha));
        assert!(pop.beta.iter().all(|&b| b == cfg.mean_beta));
        assert!(matches!(draw_population(0, &cfg, 9), Err(SynthError::ConfigInvalid(_))));
    }

    #[test]
    fn three_pl_limits() {
        assert!((three_pl_prob(0.3, 1.7, 0.3, 0.2).unwrap() - 0.6).abs() < 1e-15);
        let floor = three_pl_prob(0.5 - 50.0 / 1.3, 1.3, 0.5, 0.25).unwrap();
        assert!((floor - 0.25).abs() < 1e-9);
        assert!(matches!(three_pl_prob(0.0, 0.0, 0.0, 0.2), Err(SynthError::ParamInvalid(_))));
        assert!(matches!(three_pl_prob(0.0, 1.0, 0.0, 1.0), Err(SynthError::ParamInvalid(_))));
    }

    #[test]
    fn ceiling_student_answers_everything() {
        let design = build_design(&DesignConfig::default(), 1).unwrap();
        let pop = LatentPopulation::from_skills(vec![1.0], vec![0.0]);
        let diff = vec![0.0; design.n_questions()];
        let r = simulate_responses(&design, &pop, &diff, &ResponseConfig::default(), 4).unwrap();
        assert!(r.student(0).iter().all(|c| c.correct() && c.answered()));
        assert_eq!(r.fraction_correct(0), 1.0);
    }

    #[test]
    fn three_pl_without_items_is_a_mismatch() {
        let design = build_design(&DesignConfig::default(), 1).unwrap();
        let pop = LatentPopulation::from_skills(vec![0.5], vec![0.0]);
        let cfg = ResponseConfig {
            model: ResponseModel::ThreePl {
                items: vec![],
                scale: 4.0,
                center: 0.4,
            },
            ..Default::default()
        };
        let diff = vec![0.0; design.n_questions()];
        assert!(matches!(
            simulate_responses(&design, &pop, &diff, &cfg, 1),
            Err(SynthError::ModelMismatch(_))
        ));
    }

    #[test]
    fn booklet_assignment_is_balanced() {
        let ids: Vec<u64> = (0..10_003).collect();
        let b = assign_booklets(&ids, 4, 0, 77);
        let mut counts = [0usize; 4];
        b.iter().for_each(|&x| counts[x as usize] += 1);
        let (lo, hi) = (counts.iter().min().unwrap(), counts.iter().max().unwrap());
        assert!(hi - lo <= 1);
    }
}
