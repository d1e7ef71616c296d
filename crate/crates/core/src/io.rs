//! CSV reading and writing for every pipeline artifact.
//!
//! Conventions shared by all tables: UTF-8, comma separated, RFC 4180
//! quoting, a header row, `.` as decimal mark. Floats are written with 17
//! significant digits so a write/read round trip is exact; missing values
//! are empty fields. Question, booklet and day indices are 1-based; student
//! ids are opaque and written unchanged.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::decompose::{Excluded, Reliability, SkillEstimates, SkillRow, Spec};
use crate::difficulty::{DifficultyMethod, DifficultyRow, DifficultyTable};
use crate::synth::{Cell, ExamDesign, LatentPopulation, OutcomePanel, ResponseMatrix};

#[derive(Debug, Error)]
pub enum IoError {
    #[error("missing input file {0}")]
    Missing(PathBuf),
    #[error("{path}: {message}")]
    Io { path: PathBuf, message: String },
    #[error("{path}, row {row}, column `{column}`: {message}")]
    Parse {
        path: PathBuf,
        /// Line number in the file; the header is line 1.
        row: u64,
        column: String,
        message: String,
    },
    #[error("{path}: {message}")]
    Schema { path: PathBuf, message: String },
}

pub type Result<T> = std::result::Result<T, IoError>;

fn io_err(path: &Path, e: impl std::fmt::Display) -> IoError {
    IoError::Io {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

/// 17 significant digits; empty for NaN.
pub fn fmt_f64(x: f64) -> String {
    if x.is_nan() {
        String::new()
    } else if x.is_infinite() {
        if x > 0.0 { "inf".into() } else { "-inf".into() }
    } else if x == 0.0 {
        // normalizes -0
        "0".into()
    } else {
        format!("{x:.16e}")
    }
}

pub fn fmt_opt(x: Option<f64>) -> String {
    x.map_or_else(String::new, fmt_f64)
}

pub fn fmt_bool(b: bool) -> String {
    (b as u8).to_string()
}

// ---------------------------------------------------------------------------
// Generic tables
// ---------------------------------------------------------------------------

/// Writes a header and rows; every row must match the header width.
pub fn write_table<I, R>(path: &Path, header: &[&str], rows: I) -> Result<()>
where
    I: IntoIterator<Item = R>,
    R: IntoIterator<Item = String>,
{
    let file = File::create(path).map_err(|e| io_err(path, e))?;
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(BufWriter::new(file));
    w.write_record(header).map_err(|e| io_err(path, e))?;
    for row in rows {
        let row: Vec<String> = row.into_iter().collect();
        if row.len() != header.len() {
            return Err(IoError::Schema {
                path: path.to_path_buf(),
                message: format!("row has {} fields, header has {}", row.len(), header.len()),
            });
        }
        w.write_record(&row).map_err(|e| io_err(path, e))?;
    }
    w.flush().map_err(|e| io_err(path, e))?;
    Ok(())
}

/// A parsed CSV file with typed, row-numbered field access.
pub struct Table {
    pub path: PathBuf,
    pub headers: Vec<String>,
    records: Vec<csv::StringRecord>,
    index: HashMap<String, usize>,
}

/// One data row of a [`Table`].
pub struct Row<'a> {
    table: &'a Table,
    record: &'a csv::StringRecord,
}

impl Table {
    pub fn read(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(IoError::Missing(path.to_path_buf()));
        }
        let mut r = csv::ReaderBuilder::new()
            .has_headers(true)
            .from_path(path)
            .map_err(|e| io_err(path, e))?;
        let headers: Vec<String> = r
            .headers()
            .map_err(|e| io_err(path, e))?
            .iter()
            .map(|h| h.trim().to_string())
            .collect();
        let mut records = Vec::new();
        for rec in r.records() {
            let rec = rec.map_err(|e| {
                let row = e.position().map_or(0, |p| p.line());
                IoError::Parse {
                    path: path.to_path_buf(),
                    row,
                    column: String::new(),
                    message: e.to_string(),
                }
            })?;
            records.push(rec);
        }
        let index = headers.iter().enumerate().map(|(i, h)| (h.clone(), i)).collect();
        Ok(Self {
            path: path.to_path_buf(),
            headers,
            records,
            index,
        })
    }

    pub fn require(&self, columns: &[&str]) -> Result<()> {
        for c in columns {
            if !self.index.contains_key(*c) {
                return Err(IoError::Schema {
                    path: self.path.clone(),
                    message: format!("missing column `{c}`"),
                });
            }
        }
        Ok(())
    }

    pub fn has(&self, column: &str) -> bool {
        self.index.contains_key(column)
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn rows(&self) -> impl Iterator<Item = Row<'_>> {
        self.records.iter().map(move |record| Row { table: self, record })
    }
}

impl Row<'_> {
    pub fn line(&self) -> u64 {
        self.record.position().map_or(0, |p| p.line())
    }

    fn err(&self, column: &str, message: impl Into<String>) -> IoError {
        IoError::Parse {
            path: self.table.path.clone(),
            row: self.line(),
            column: column.to_string(),
            message: message.into(),
        }
    }

    pub fn str(&self, column: &str) -> Result<&str> {
        let i = *self.table.index.get(column).ok_or_else(|| self.err(column, "no such column"))?;
        self.record.get(i).map(str::trim).ok_or_else(|| self.err(column, "missing field"))
    }

    pub fn f64(&self, column: &str) -> Result<f64> {
        let s = self.str(column)?;
        if s.is_empty() {
            return Ok(f64::NAN);
        }
        s.parse::<f64>().map_err(|_| self.err(column, format!("`{s}` is not a number")))
    }

    pub fn u64(&self, column: &str) -> Result<u64> {
        let s = self.str(column)?;
        s.parse::<u64>()
            .map_err(|_| self.err(column, format!("`{s}` is not a nonnegative integer")))
    }

    /// A 1-based index converted to 0-based.
    pub fn index(&self, column: &str) -> Result<usize> {
        match self.u64(column)? {
            0 => Err(self.err(column, "indices are 1-based")),
            v => Ok(v as usize - 1),
        }
    }

    pub fn bool(&self, column: &str) -> Result<bool> {
        match self.str(column)? {
            "1" | "true" => Ok(true),
            "0" | "false" => Ok(false),
            s => Err(self.err(column, format!("`{s}` is not 0 or 1"))),
        }
    }

    /// Empty means missing.
    pub fn opt_u32(&self, column: &str) -> Result<Option<u32>> {
        let s = self.str(column)?;
        if s.is_empty() {
            return Ok(None);
        }
        s.parse::<u32>()
            .map(Some)
            .map_err(|_| self.err(column, format!("`{s}` is not a nonnegative integer")))
    }
}

// ---------------------------------------------------------------------------
// design.csv
// ---------------------------------------------------------------------------

pub const DESIGN_HEADER: [&str; 6] = ["question_id", "day", "subject", "length_words", "booklet", "position"];

/// One row per (question, booklet).
pub fn write_design(path: &Path, design: &ExamDesign) -> Result<()> {
    let rows = (0..design.n_questions()).flat_map(|q| {
        (0..design.booklets).map(move |b| {
            vec![
                (q + 1).to_string(),
                (design.day_of(q) + 1).to_string(),
                design.subject_of[q].clone(),
                design.length_words[q].to_string(),
                (b + 1).to_string(),
                design.position(b, q).to_string(),
            ]
        })
    });
    write_table(path, &DESIGN_HEADER, rows)
}

pub fn read_design(path: &Path) -> Result<ExamDesign> {
    let t = Table::read(path)?;
    t.require(&DESIGN_HEADER)?;
    let mut entries = Vec::with_capacity(t.len());
    for row in t.rows() {
        entries.push((
            row.index("question_id")?,
            row.index("day")?,
            row.str("subject")?.to_string(),
            row.u64("length_words")? as u32,
            row.index("booklet")?,
            row.index("position")?,
            row.line(),
        ));
    }
    let schema = |m: String| IoError::Schema {
        path: path.to_path_buf(),
        message: m,
    };
    if entries.is_empty() {
        return Err(schema("no rows".into()));
    }
    let n_questions = entries.iter().map(|e| e.0).max().unwrap_or(0) + 1;
    let days = entries.iter().map(|e| e.1).max().unwrap_or(0) + 1;
    let booklets = entries.iter().map(|e| e.4).max().unwrap_or(0) + 1;
    if n_questions % days != 0 {
        return Err(schema(format!("{n_questions} questions do not split into {days} equal days")));
    }
    let qpd = n_questions / days;
    let mut subject_of = vec![String::new(); n_questions];
    let mut length_words = vec![0u32; n_questions];
    let mut orderings = vec![vec![vec![usize::MAX; qpd]; days]; booklets];
    for (q, day, subject, words, b, p, line) in entries {
        if day != q / qpd {
            return Err(schema(format!("row {line}: question {} is not on day {}", q + 1, day + 1)));
        }
        if p >= qpd {
            return Err(schema(format!("row {line}: position {} beyond {qpd}", p + 1)));
        }
        if orderings[b][day][p] != usize::MAX {
            return Err(schema(format!("row {line}: booklet {} position {} used twice", b + 1, p + 1)));
        }
        orderings[b][day][p] = q;
        subject_of[q] = subject;
        length_words[q] = words;
    }
    if orderings.iter().flatten().flatten().any(|&q| q == usize::MAX) {
        return Err(schema("every booklet must list every question".into()));
    }
    ExamDesign::from_orderings(days, qpd, orderings, subject_of, length_words).map_err(|e| schema(e.to_string()))
}

// ---------------------------------------------------------------------------
// Simulator truth
// ---------------------------------------------------------------------------

pub fn write_latents(path: &Path, pop: &LatentPopulation) -> Result<()> {
    let rows = (0..pop.len()).map(|i| {
        vec![
            pop.student_ids[i].to_string(),
            fmt_f64(pop.alpha[i]),
            fmt_f64(pop.beta[i]),
        ]
    });
    write_table(path, &["student_id", "alpha_true", "beta_true"], rows)
}

/// `difficulty` is the linear-model difficulty; 3PL parameters are empty
/// under the linear model.
pub fn write_items(path: &Path, difficulty: &[f64], items: Option<&[crate::synth::ItemParams]>) -> Result<()> {
    let rows = difficulty.iter().enumerate().map(|(q, d)| {
        let p = items.map(|it| it[q]);
        vec![
            (q + 1).to_string(),
            fmt_f64(*d),
            fmt_opt(p.map(|p| p.a)),
            fmt_opt(p.map(|p| p.b)),
            fmt_opt(p.map(|p| p.c)),
        ]
    });
    write_table(path, &["question_id", "difficulty_true", "a", "b", "c"], rows)
}

// ---------------------------------------------------------------------------
// responses.csv
// ---------------------------------------------------------------------------

pub const RESPONSES_HEADER: [&str; 6] = ["student_id", "question_id", "booklet", "position", "answered", "correct"];

/// Long format, present cells only, rows ordered by student then question.
pub fn write_responses(path: &Path, responses: &ResponseMatrix) -> Result<()> {
    let file = File::create(path).map_err(|e| io_err(path, e))?;
    let mut w = BufWriter::new(file);
    // Hand-rolled: all fields are integers, and this file is by far the largest.
    let mut out = || -> std::io::Result<()> {
        writeln!(w, "{}", RESPONSES_HEADER.join(","))?;
        for i in 0..responses.n_students() {
            let id = responses.student_ids[i];
            for (q, c) in responses.student(i).iter().enumerate() {
                if c.present() {
                    writeln!(
                        w,
                        "{id},{},{},{},{},{}",
                        q + 1,
                        c.booklet as usize + 1,
                        c.position,
                        c.answered() as u8,
                        c.correct() as u8
                    )?;
                }
            }
        }
        w.flush()
    };
    out().map_err(|e| io_err(path, e))
}

/// Students are ordered by id. Positions are checked against the design.
pub fn read_responses(path: &Path, design: &ExamDesign) -> Result<ResponseMatrix> {
    let t = Table::read(path)?;
    t.require(&RESPONSES_HEADER)?;
    let nq = design.n_questions();
    let mut cells: BTreeMap<u64, Vec<(usize, Cell)>> = BTreeMap::new();
    for row in t.rows() {
        let id = row.u64("student_id")?;
        let q = row.index("question_id")?;
        if q >= nq {
            return Err(row.err("question_id", format!("question {} not in design", q + 1)));
        }
        let b = row.index("booklet")?;
        if b >= design.booklets {
            return Err(row.err("booklet", format!("booklet {} not in design", b + 1)));
        }
        let position = row.u64("position")? as u16;
        if position != design.position(b, q) {
            return Err(row.err(
                "position",
                format!("design puts question {} at {} in booklet {}", q + 1, design.position(b, q), b + 1),
            ));
        }
        let answered = row.bool("answered")?;
        let correct = row.bool("correct")?;
        if correct && !answered {
            return Err(row.err("correct", "a correct response must be answered"));
        }
        cells
            .entry(id)
            .or_default()
            .push((q, Cell::new(b as u8, position, answered, correct)));
    }
    let ids: Vec<u64> = cells.keys().copied().collect();
    let mut m = ResponseMatrix::empty(ids, design.days, design.questions_per_day);
    for (i, (_, list)) in cells.into_iter().enumerate() {
        for (q, c) in list {
            m.set(i, q, c);
        }
    }
    Ok(m)
}

// ---------------------------------------------------------------------------
// outcomes.csv
// ---------------------------------------------------------------------------

const OUTCOME_FIXED: [&str; 8] = [
    "student_id",
    "log_wage",
    "enrolled",
    "college_quality",
    "employer_id",
    "occupation_id",
    "degree_id",
    "industry_id",
];

/// Prefix of the 0/1 group-membership columns.
pub const GROUP_PREFIX: &str = "group_";

/// Student-level outcomes plus the group flags used for gap analyses.
#[derive(Debug, Clone, PartialEq)]
pub struct OutcomeData {
    pub panel: OutcomePanel,
    /// `(name, flag per panel row)`; `None` marks a missing flag.
    pub groups: Vec<(String, Vec<Option<bool>>)>,
}

/// Fixed columns, then `x1..xk` controls, then one `group_<name>` column
/// per group.
pub fn write_outcomes(path: &Path, panel: &OutcomePanel, pop: &LatentPopulation) -> Result<()> {
    let flags: HashMap<u64, usize> = pop.student_ids.iter().enumerate().map(|(i, &id)| (id, i)).collect();
    let mut header: Vec<String> = OUTCOME_FIXED.iter().map(|s| s.to_string()).collect();
    header.extend(panel.control_labels.iter().cloned());
    header.extend(pop.group_names.iter().map(|g| format!("{GROUP_PREFIX}{g}")));
    let header_ref: Vec<&str> = header.iter().map(String::as_str).collect();
    let rows = (0..panel.student_ids.len()).map(|i| {
        let id = panel.student_ids[i];
        let mut r = vec![
            id.to_string(),
            fmt_f64(panel.log_wage[i]),
            fmt_bool(panel.enrolled[i]),
            fmt_f64(panel.college_quality[i]),
            panel.employer_id[i].to_string(),
            panel.occupation_id[i].to_string(),
            panel.degree_id[i].to_string(),
            panel.industry_id[i].to_string(),
        ];
        r.extend(panel.controls.iter().map(|c| fmt_f64(c[i])));
        let k = flags.get(&id);
        r.extend(pop.group_flags.iter().map(|g| k.map_or_else(String::new, |&k| fmt_bool(g[k]))));
        r
    });
    write_table(path, &header_ref, rows)
}

/// Missing catalog ids read as `u32::MAX`; missing numeric outcomes and
/// controls as NaN. Every column that is neither fixed nor a group flag is
/// a control.
pub fn read_outcomes(path: &Path) -> Result<OutcomeData> {
    let t = Table::read(path)?;
    t.require(&["student_id"])?;
    let controls: Vec<String> = t
        .headers
        .iter()
        .filter(|h| !OUTCOME_FIXED.contains(&h.as_str()) && !h.starts_with(GROUP_PREFIX))
        .cloned()
        .collect();
    let group_cols: Vec<String> = t.headers.iter().filter(|h| h.starts_with(GROUP_PREFIX)).cloned().collect();
    let mut panel = OutcomePanel {
        student_ids: Vec::new(),
        log_wage: Vec::new(),
        enrolled: Vec::new(),
        college_quality: Vec::new(),
        employer_id: Vec::new(),
        occupation_id: Vec::new(),
        degree_id: Vec::new(),
        industry_id: Vec::new(),
        control_labels: controls.clone(),
        controls: vec![Vec::new(); controls.len()],
    };
    let mut groups: Vec<(String, Vec<Option<bool>>)> = group_cols
        .iter()
        .map(|g| (g[GROUP_PREFIX.len()..].to_string(), Vec::new()))
        .collect();
    let opt_f64 = |row: &Row, c: &str| if t.has(c) { row.f64(c) } else { Ok(f64::NAN) };
    let opt_id = |row: &Row, c: &str| -> Result<u32> {
        if t.has(c) { Ok(row.opt_u32(c)?.unwrap_or(u32::MAX)) } else { Ok(u32::MAX) }
    };
    for row in t.rows() {
        panel.student_ids.push(row.u64("student_id")?);
        panel.log_wage.push(opt_f64(&row, "log_wage")?);
        // Missing enrollment is read as not enrolled only when the column is absent.
        panel.enrolled.push(if t.has("enrolled") { row.bool("enrolled")? } else { false });
        panel.college_quality.push(opt_f64(&row, "college_quality")?);
        panel.employer_id.push(opt_id(&row, "employer_id")?);
        panel.occupation_id.push(opt_id(&row, "occupation_id")?);
        panel.degree_id.push(opt_id(&row, "degree_id")?);
        panel.industry_id.push(opt_id(&row, "industry_id")?);
        for (k, c) in controls.iter().enumerate() {
            panel.controls[k].push(row.f64(c)?);
        }
        for (k, c) in group_cols.iter().enumerate() {
            let v = if row.str(c)?.is_empty() { None } else { Some(row.bool(c)?) };
            groups[k].1.push(v);
        }
    }
    Ok(OutcomeData { panel, groups })
}

// ---------------------------------------------------------------------------
// difficulty.csv
// ---------------------------------------------------------------------------

pub const DIFFICULTY_HEADER: [&str; 6] = [
    "question_id",
    "method",
    "fraction_correct_raw",
    "avg_position",
    "position_effect_used",
    "difficulty",
];

pub fn write_difficulty(path: &Path, tables: &[DifficultyTable]) -> Result<()> {
    let rows = tables.iter().flat_map(|t| {
        t.rows.iter().map(move |r| {
            vec![
                (r.question + 1).to_string(),
                t.method.as_str().to_string(),
                fmt_f64(r.fraction_correct_raw),
                fmt_f64(r.avg_position),
                fmt_f64(r.position_effect_used),
                fmt_f64(r.difficulty),
            ]
        })
    });
    write_table(path, &DIFFICULTY_HEADER, rows)
}

/// One table per method present in the file, in file order. The fallback
/// flag is not stored and reads as `false`.
pub fn read_difficulty(path: &Path) -> Result<Vec<DifficultyTable>> {
    let t = Table::read(path)?;
    t.require(&DIFFICULTY_HEADER)?;
    let mut tables: Vec<DifficultyTable> = Vec::new();
    for row in t.rows() {
        let method: DifficultyMethod = row
            .str("method")?
            .parse()
            .map_err(|e: crate::difficulty::DifficultyError| row.err("method", e.to_string()))?;
        let r = DifficultyRow {
            question: row.index("question_id")?,
            fraction_correct_raw: row.f64("fraction_correct_raw")?,
            avg_position: row.f64("avg_position")?,
            position_effect_used: row.f64("position_effect_used")?,
            difficulty: row.f64("difficulty")?,
            fallback: false,
        };
        match tables.iter_mut().find(|t| t.method == method) {
            Some(t) => t.rows.push(r),
            None => tables.push(DifficultyTable { method, rows: vec![r] }),
        }
    }
    Ok(tables)
}

// ---------------------------------------------------------------------------
// estimates.csv
// ---------------------------------------------------------------------------

/// The last two columns let the score identity be checked from the file
/// alone.
pub const ESTIMATES_HEADER: [&str; 11] = [
    "student_id",
    "spec",
    "alpha_hat",
    "beta_hat",
    "delta_hat",
    "se_alpha",
    "se_beta",
    "n_items",
    "mean_posnorm",
    "fraction_correct",
    "mean_difficulty",
];

pub fn write_estimates(path: &Path, est: &SkillEstimates) -> Result<()> {
    let rows = est.rows.iter().map(|r| {
        vec![
            r.student_id.to_string(),
            est.spec.as_str().to_string(),
            fmt_f64(r.alpha_hat),
            fmt_f64(r.beta_hat),
            fmt_f64(r.delta_hat),
            fmt_f64(r.se_alpha),
            fmt_f64(r.se_beta),
            r.n_items.to_string(),
            fmt_f64(r.mean_posnorm),
            fmt_f64(r.fraction_correct),
            fmt_f64(r.mean_difficulty),
        ]
    });
    write_table(path, &ESTIMATES_HEADER, rows)
}

/// Exclusions are not part of this file and come back empty.
pub fn read_estimates(path: &Path) -> Result<SkillEstimates> {
    let t = Table::read(path)?;
    t.require(&ESTIMATES_HEADER[..9])?;
    let mut spec: Option<Spec> = None;
    let mut rows = Vec::with_capacity(t.len());
    for row in t.rows() {
        let s: Spec = row
            .str("spec")?
            .parse()
            .map_err(|e: crate::decompose::DecomposeError| row.err("spec", e.to_string()))?;
        if spec.is_some_and(|p| p != s) {
            return Err(row.err("spec", "mixed specs in one file"));
        }
        spec = Some(s);
        let opt = |c: &str| if t.has(c) { row.f64(c) } else { Ok(f64::NAN) };
        rows.push(SkillRow {
            student_id: row.u64("student_id")?,
            alpha_hat: row.f64("alpha_hat")?,
            beta_hat: row.f64("beta_hat")?,
            delta_hat: row.f64("delta_hat")?,
            se_alpha: row.f64("se_alpha")?,
            se_beta: row.f64("se_beta")?,
            n_items: row.u64("n_items")? as usize,
            mean_posnorm: row.f64("mean_posnorm")?,
            fraction_correct: opt("fraction_correct")?,
            mean_difficulty: opt("mean_difficulty")?,
        });
    }
    rows.sort_by_key(|r| r.student_id);
    Ok(SkillEstimates {
        spec: spec.unwrap_or_default(),
        rows,
        excluded: Vec::new(),
    })
}

pub fn write_excluded(path: &Path, excluded: &[Excluded]) -> Result<()> {
    let rows = excluded.iter().map(|e| {
        vec![
            e.student_id.to_string(),
            e.reason.reason_code().to_string(),
            e.reason.to_string(),
        ]
    });
    write_table(path, &["student_id", "reason", "detail"], rows)
}

pub fn write_reliability(path: &Path, bins_path: &Path, rel: &Reliability) -> Result<()> {
    write_table(
        path,
        &["r_alpha", "r_beta", "n_matched"],
        [vec![fmt_f64(rel.r_alpha), fmt_f64(rel.r_beta), rel.n_matched.to_string()]],
    )?;
    let rows = rel.bins.iter().map(|b| {
        vec![
            b.skill.to_string(),
            (b.bin + 1).to_string(),
            b.n.to_string(),
            fmt_f64(b.mean_t0),
            fmt_f64(b.mean_t1),
        ]
    });
    write_table(bins_path, &["skill", "bin", "n", "mean_previous", "mean_current"], rows)
}

/// Writes `(label, value)` pairs as a two-column table.
pub fn write_key_values(path: &Path, pairs: &[(&str, String)]) -> Result<()> {
    write_table(path, &["statistic", "value"], pairs.iter().map(|(k, v)| vec![k.to_string(), v.clone()]))
}
