//! Batch pipeline: simulate → estimate → decompose → analyze → report.
//!
//! Each stage reads its inputs from the output directory (or, for external
//! data, from `input.dir`), writes CSVs next to them and records sha256
//! digests of everything it read and wrote in `manifest.json`. A stage only
//! accepts an output-directory file that an earlier stage recorded, and
//! refuses it if the file changed since.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::analysis::{
    self, GapVariant, Outcome, ReturnsResult, ReturnsSpec, SkillSample, SkillScale, ValidityTarget,
};
use crate::decompose::{self, Demean, DecomposeOptions, DifficultyInput, SampleFilter, Spec};
use crate::difficulty::{self, DifficultyMethod, DifficultyTable};
use crate::io::{self, fmt_f64, fmt_opt, IoError, Table};
use crate::position_effects::{self as pe, EnduranceEstimate};
use crate::synth::{
    self, DesignConfig, LatentConfig, NonresponseConfig, OutcomeConfig, ResponseConfig, ResponseModel,
    RetestConfig,
};

pub const THREADS_ENV: &str = "ENDURANCE_THREADS";
pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("missing input: {0}")]
    MissingInput(String),
    #[error("identity check failed: {0}")]
    IdentityFailure(String),
    #[error(transparent)]
    Io(#[from] IoError),
    #[error("{stage}: {message}")]
    Stage { stage: &'static str, message: String },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::MissingInput(_) | CliError::Io(IoError::Missing(_)) => 3,
            CliError::IdentityFailure(_) => 4,
            CliError::Io(_) | CliError::Stage { .. } => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

fn stage_err(stage: &'static str) -> impl Fn(&dyn std::fmt::Display) -> CliError {
    move |e| CliError::Stage {
        stage,
        message: e.to_string(),
    }
}

// ---------------------------------------------------------------------------
// Command line
// ---------------------------------------------------------------------------

#[derive(Debug, Parser)]
#[command(name = "endurance", version, about = "Simulate exams and decompose test scores into ability and endurance")]
pub struct Cli {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides `seed` from the configuration.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Overrides `output.dir` from the configuration.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Subcommand)]
pub enum Command {
    /// Draw a design, a cohort, responses and outcomes.
    Simulate,
    /// Question difficulty and mean position effects.
    Estimate,
    /// Per-student ability and endurance (plus retest reliability).
    Decompose,
    /// Returns, group gaps, question validity and the summary.
    Analyze {
        /// Exit with status 4 if an exact identity fails.
        #[arg(long)]
        check_identities: bool,
    },
    /// Rebuild summary.md from the CSVs on disk.
    Report,
    /// Validate the configuration and the manifest digests.
    Check {
        /// Also fail if identities.csv records a failed identity.
        #[arg(long)]
        check_identities: bool,
    },
    /// All stages in order.
    Run {
        #[arg(long)]
        check_identities: bool,
    },
}

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub output: OutputSection,
    pub input: InputSection,
    pub cohort: CohortSection,
    pub design: DesignConfig,
    pub latent: LatentConfig,
    pub response: ResponseSection,
    pub outcomes: OutcomeConfig,
    pub retest: RetestSection,
    pub methods: MethodsSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: None,
            output: OutputSection::default(),
            input: InputSection::default(),
            cohort: CohortSection::default(),
            design: DesignConfig::default(),
            latent: LatentConfig::default(),
            response: ResponseSection::default(),
            outcomes: OutcomeConfig::default(),
            retest: RetestSection::default(),
            methods: MethodsSection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    pub dir: PathBuf,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self { dir: PathBuf::from("out") }
    }
}

/// Directory with externally produced `design.csv`, `responses.csv`,
/// `responses_prev.csv` and `outcomes.csv`; files found there take
/// precedence over the output directory.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InputSection {
    pub dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CohortSection {
    pub n_students: usize,
}

impl Default for CohortSection {
    fn default() -> Self {
        Self { n_students: 20_000 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ResponseSection {
    /// `linear` or `three_pl`.
    pub model: String,
    /// SD of the true question difficulties (linear model).
    pub difficulty_sd: f64,
    pub difficulty_loading: f64,
    pub item_b_mean: f64,
    pub item_b_sd: f64,
    pub item_guess: f64,
    pub theta_scale: f64,
    pub theta_center: f64,
    pub nonresponse: Option<NonresponseConfig>,
}

impl Default for ResponseSection {
    fn default() -> Self {
        Self {
            model: "linear".into(),
            difficulty_sd: 0.05,
            difficulty_loading: 1.0,
            item_b_mean: 1.5,
            item_b_sd: 0.5,
            item_guess: 0.2,
            theta_scale: 10.0,
            theta_center: 0.373,
            nonresponse: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RetestSection {
    /// Simulate a previous sitting of the same cohort.
    pub enabled: bool,
    pub sd_alpha_transient: f64,
    pub sd_beta_transient: f64,
}

impl Default for RetestSection {
    fn default() -> Self {
        let d = RetestConfig::default();
        Self {
            enabled: true,
            sd_alpha_transient: d.sd_alpha_transient,
            sd_beta_transient: d.sd_beta_transient,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MethodsSection {
    /// A difficulty method name, or `all`.
    pub difficulty: String,
    /// Difficulty measure used by the adjusted position design and as the
    /// per-student difficulty control.
    pub adjustment_difficulty: String,
    /// Include the difficulty control in the per-student regressions.
    pub decompose_with_difficulty: bool,
    /// Out-of-sample (two-fold) difficulty for the adjusted designs.
    pub holdout: bool,
    pub spec: String,
    pub demean: String,
    /// `none`, `trim_deciles`, `trim_quintiles` or `drop_positive_beta`.
    pub sample_filter: String,
    pub precision_weights: bool,
    /// Use shrunk skill estimates in the returns regressions.
    pub shrink_skills: bool,
    /// `sample`, `latent` or `persistent`.
    pub skill_scale: String,
    pub controls: bool,
    pub impute_missing_controls: bool,
    pub outcomes: Vec<String>,
    /// Group flags to decompose gaps for; empty means every flag present.
    pub gap_groups: Vec<String>,
    pub validity_min_cell: usize,
    pub group_min_n: usize,
}

impl Default for MethodsSection {
    fn default() -> Self {
        Self {
            difficulty: "all".into(),
            adjustment_difficulty: "pooled".into(),
            decompose_with_difficulty: true,
            holdout: true,
            spec: "baseline".into(),
            demean: "per_booklet".into(),
            sample_filter: "none".into(),
            precision_weights: false,
            shrink_skills: false,
            skill_scale: "latent".into(),
            controls: true,
            impute_missing_controls: false,
            outcomes: Outcome::ALL.iter().map(|o| o.label().to_string()).collect(),
            gap_groups: Vec::new(),
            validity_min_cell: analysis::DEFAULT_MIN_CELL,
            group_min_n: 200,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScaleChoice {
    Sample,
    Latent,
    Persistent,
}

/// Method names resolved to their types.
#[derive(Debug, Clone, PartialEq)]
pub struct Methods {
    pub difficulty: Vec<DifficultyMethod>,
    pub adjustment: DifficultyMethod,
    pub spec: Spec,
    pub demean: Demean,
    pub filter: Option<SampleFilter>,
    pub scale: ScaleChoice,
    pub outcomes: Vec<Outcome>,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| CliError::Config(e.message().to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    /// Checks every method name and the cohort size.
    pub fn methods(&self) -> Result<Methods> {
        let m = &self.methods;
        let cfg = |e: &dyn std::fmt::Display| CliError::Config(e.to_string());
        let difficulty = if m.difficulty == "all" {
            DifficultyMethod::ALL.to_vec()
        } else {
            vec![m.difficulty.parse().map_err(|e| cfg(&e))?]
        };
        let filter = match m.sample_filter.as_str() {
            "none" => None,
            s => Some(s.parse().map_err(|e| cfg(&e))?),
        };
        let scale = match m.skill_scale.as_str() {
            "sample" => ScaleChoice::Sample,
            "latent" => ScaleChoice::Latent,
            "persistent" => ScaleChoice::Persistent,
            s => return Err(CliError::Config(format!("unknown methods.skill_scale `{s}`"))),
        };
        if self.cohort.n_students == 0 {
            return Err(CliError::Config("cohort.n_students must be at least 1".into()));
        }
        if !["linear", "three_pl"].contains(&self.response.model.as_str()) {
            return Err(CliError::Config(format!(
                "response.model must be `linear` or `three_pl`, got `{}`",
                self.response.model
            )));
        }
        Ok(Methods {
            difficulty,
            adjustment: m.adjustment_difficulty.parse().map_err(|e| cfg(&e))?,
            spec: m.spec.parse().map_err(|e| cfg(&e))?,
            demean: m.demean.parse().map_err(|e| cfg(&e))?,
            filter,
            scale,
            outcomes: m
                .outcomes
                .iter()
                .map(|o| o.parse().map_err(|e| cfg(&e)))
                .collect::<Result<_>>()?,
        })
    }

    pub fn require_seed(&self) -> Result<u64> {
        self.seed.ok_or_else(|| {
            CliError::Config("missing field `seed` (set it in the config or pass --seed)".into())
        })
    }

    /// sha256 of the canonical JSON form of the effective configuration.
    pub fn digest(&self) -> String {
        let json = serde_json::to_string(self).expect("configuration serializes");
        hex(&Sha256::digest(json.as_bytes()))
    }

    fn response_config(&self, n_questions: usize, seed: u64) -> (ResponseConfig, Vec<f64>, Option<Vec<synth::ItemParams>>) {
        let r = &self.response;
        if r.model == "three_pl" {
            let items = synth::draw_item_params(n_questions, r.item_b_mean, r.item_b_sd, r.item_guess, seed);
            let cfg = ResponseConfig {
                model: ResponseModel::ThreePl {
                    items: items.clone(),
                    scale: r.theta_scale,
                    center: r.theta_center,
                },
                nonresponse: r.nonresponse,
                beta_multiplier: None,
            };
            (cfg, vec![0.0; n_questions], Some(items))
        } else {
            let d = synth::draw_item_difficulty(n_questions, r.difficulty_sd, seed);
            let cfg = ResponseConfig {
                model: ResponseModel::Linear {
                    difficulty_loading: r.difficulty_loading,
                },
                nonresponse: r.nonresponse,
                beta_multiplier: None,
            };
            (cfg, d, None)
        }
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().fold(String::with_capacity(bytes.len() * 2), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

pub fn file_digest(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| IoError::Io {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    Ok(hex(&Sha256::digest(&bytes)))
}

// ---------------------------------------------------------------------------
// Manifest
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub config_sha256: String,
    /// File name (or external path) → sha256.
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    pub wall_ms: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub seed: Option<u64>,
    pub stages: BTreeMap<String, StageRecord>,
}

impl RunManifest {
    pub fn load(dir: &Path) -> Result<Option<Self>> {
        let p = dir.join(MANIFEST);
        if !p.exists() {
            return Ok(None);
        }
        let text = std::fs::read_to_string(&p).map_err(|e| IoError::Io {
            path: p.clone(),
            message: e.to_string(),
        })?;
        serde_json::from_str(&text).map(Some).map_err(|e| {
            CliError::Io(IoError::Schema {
                path: p,
                message: e.to_string(),
            })
        })
    }

    fn save(&self, dir: &Path) -> Result<()> {
        let p = dir.join(MANIFEST);
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        std::fs::write(&p, text + "\n").map_err(|e| {
            CliError::Io(IoError::Io {
                path: p,
                message: e.to_string(),
            })
        })
    }

    /// Digest recorded for an output-directory file by any stage.
    pub fn recorded(&self, name: &str) -> Option<&str> {
        self.stages.values().find_map(|s| s.outputs.get(name).map(String::as_str))
    }

    /// Output files whose current digest differs from the recorded one.
    pub fn verify(&self, dir: &Path) -> Result<Vec<String>> {
        let mut bad = Vec::new();
        for stage in self.stages.values() {
            for (name, digest) in &stage.outputs {
                let p = dir.join(name);
                if !p.exists() || &file_digest(&p)? != digest {
                    bad.push(name.clone());
                }
            }
        }
        bad.sort();
        bad.dedup();
        Ok(bad)
    }
}

// ---------------------------------------------------------------------------
// Stage bookkeeping
// ---------------------------------------------------------------------------

pub struct Context {
    pub config: RunConfig,
    pub methods: Methods,
    pub out: PathBuf,
}

impl Context {
    pub fn new(config: RunConfig) -> Result<Self> {
        let methods = config.methods()?;
        let out = config.output.dir.clone();
        Ok(Self { config, methods, out })
    }
}

struct Stage<'a> {
    name: &'static str,
    ctx: &'a Context,
    manifest: RunManifest,
    record: StageRecord,
    notes: Vec<(String, String)>,
    start: Instant,
}

impl<'a> Stage<'a> {
    fn begin(name: &'static str, ctx: &'a Context, fresh: bool) -> Result<Self> {
        std::fs::create_dir_all(&ctx.out).map_err(|e| IoError::Io {
            path: ctx.out.clone(),
            message: e.to_string(),
        })?;
        let manifest = if fresh { None } else { RunManifest::load(&ctx.out)? };
        let manifest = manifest.unwrap_or_else(|| RunManifest {
            tool: env!("CARGO_PKG_NAME").into(),
            version: env!("CARGO_PKG_VERSION").into(),
            seed: ctx.config.seed,
            stages: BTreeMap::new(),
        });
        Ok(Self {
            name,
            ctx,
            manifest,
            record: StageRecord {
                config_sha256: ctx.config.digest(),
                ..Default::default()
            },
            notes: Vec::new(),
            start: Instant::now(),
        })
    }

    fn locate(&self, name: &str) -> Result<Option<(PathBuf, String)>> {
        if let Some(dir) = &self.ctx.config.input.dir {
            let p = dir.join(name);
            if p.exists() {
                return Ok(Some((p.clone(), p.display().to_string())));
            }
        }
        let p = self.ctx.out.join(name);
        match self.manifest.recorded(name) {
            None => Ok(None),
            Some(_) if !p.exists() => Ok(None),
            Some(d) => {
                if file_digest(&p)? != d {
                    return Err(CliError::MissingInput(format!(
                        "{name} changed after it was written; rerun the stage that produces it"
                    )));
                }
                Ok(Some((p, name.to_string())))
            }
        }
    }

    fn input(&mut self, name: &str) -> Result<PathBuf> {
        match self.optional_input(name)? {
            Some(p) => Ok(p),
            None => Err(CliError::MissingInput(format!(
                "{name} (run the earlier stages into {} or place it under input.dir)",
                self.ctx.out.display()
            ))),
        }
    }

    fn optional_input(&mut self, name: &str) -> Result<Option<PathBuf>> {
        let Some((p, key)) = self.locate(name)? else {
            return Ok(None);
        };
        self.record.inputs.insert(key, file_digest(&p)?);
        Ok(Some(p))
    }

    fn output(&mut self, name: &str, write: impl FnOnce(&Path) -> io::Result<()>) -> Result<()> {
        let p = self.ctx.out.join(name);
        write(&p)?;
        self.record.outputs.insert(name.to_string(), file_digest(&p)?);
        Ok(())
    }

    fn note(&mut self, item: impl Into<String>, message: impl Into<String>) {
        let (item, message) = (item.into(), message.into());
        eprintln!("[{}] {item}: {message}", self.name);
        self.notes.push((item, message));
    }

    fn finish(mut self) -> Result<()> {
        let notes = std::mem::take(&mut self.notes);
        let name = format!("{}_notes.csv", self.name);
        self.output(&name, |p| {
            io::write_table(p, &["item", "message"], notes.into_iter().map(|(a, b)| vec![a, b]))
        })?;
        self.record.wall_ms = self.start.elapsed().as_millis() as u64;
        self.manifest.seed = self.ctx.config.seed.or(self.manifest.seed);
        self.manifest.stages.insert(self.name.to_string(), self.record);
        self.manifest.save(&self.ctx.out)
    }
}

// ---------------------------------------------------------------------------
// simulate
// ---------------------------------------------------------------------------

pub fn cmd_simulate(ctx: &Context) -> Result<()> {
    let cfg = &ctx.config;
    let seed = cfg.require_seed()?;
    let design = synth::build_design(&cfg.design, seed).map_err(|e| CliError::Config(e.to_string()))?;
    let pop = synth::draw_population(cfg.cohort.n_students, &cfg.latent, seed)
        .map_err(|e| CliError::Config(e.to_string()))?;
    let (response, difficulty_true, items) = cfg.response_config(design.n_questions(), seed);
    let (previous, current) = if cfg.retest.enabled {
        let rc = RetestConfig {
            sd_alpha_transient: cfg.retest.sd_alpha_transient,
            sd_beta_transient: cfg.retest.sd_beta_transient,
        };
        let (p, c) = synth::simulate_retest(&pop, &design, &difficulty_true, &response, &rc, seed)
            .map_err(|e| CliError::Config(e.to_string()))?;
        (Some(p), c)
    } else {
        let c = synth::simulate_responses(&design, &pop, &difficulty_true, &response, seed)
            .map_err(|e| CliError::Config(e.to_string()))?;
        (None, c)
    };
    let outcomes = synth::simulate_outcomes(&pop, &cfg.outcomes, seed).map_err(|e| CliError::Config(e.to_string()))?;

    let mut st = Stage::begin("simulate", ctx, true)?;
    st.output("design.csv", |p| io::write_design(p, &design))?;
    st.output("students_latent.csv", |p| io::write_latents(p, &pop))?;
    let truth: Vec<f64> = if items.is_some() { vec![f64::NAN; design.n_questions()] } else { difficulty_true };
    st.output("items_true.csv", |p| io::write_items(p, &truth, items.as_deref()))?;
    st.output("responses.csv", |p| io::write_responses(p, &current))?;
    if let Some(prev) = &previous {
        st.output("responses_prev.csv", |p| io::write_responses(p, prev))?;
    }
    st.output("outcomes.csv", |p| io::write_outcomes(p, &outcomes, &pop))?;
    if pop.clamp_events > 0 {
        st.note("latent", format!("{} skill values clamped to their bounds", pop.clamp_events));
    }
    if current.clamp_events > 0 {
        st.note("responses", format!("{} cell probabilities clamped into [0, 1]", current.clamp_events));
    }
    st.finish()
}

// ---------------------------------------------------------------------------
// estimate
// ---------------------------------------------------------------------------

const POSITION_HEADER: [&str; 10] = [
    "design",
    "subgroup",
    "beta_daily",
    "se",
    "per_position",
    "n_questions",
    "n_cells",
    "r_squared",
    "intercept",
    "se_intercept",
];

fn position_row(subgroup: &str, e: &EnduranceEstimate, qpd: usize, intercept: Option<(f64, f64)>) -> Vec<String> {
    vec![
        e.design_label.label().to_string(),
        subgroup.to_string(),
        fmt_f64(e.beta_daily),
        fmt_f64(e.se),
        fmt_f64(e.per_position(qpd)),
        e.n_questions.to_string(),
        e.n_cells.to_string(),
        fmt_f64(e.r_squared),
        fmt_opt(intercept.map(|i| i.0)),
        fmt_opt(intercept.map(|i| i.1)),
    ]
}

pub fn cmd_estimate(ctx: &Context) -> Result<()> {
    let err = stage_err("estimate");
    let mut st = Stage::begin("estimate", ctx, false)?;
    let design = io::read_design(&st.input("design.csv")?)?;
    let responses = io::read_responses(&st.input("responses.csv")?, &design)?;
    let panel = pe::build_booklet_panel(&responses, &design).map_err(|e| err(&e))?;
    let qpd = design.questions_per_day;

    let mut tables: Vec<DifficultyTable> = Vec::new();
    for &m in &ctx.methods.difficulty {
        match difficulty::difficulty_from_panel(&panel, m) {
            Ok(t) => {
                let fallbacks = t.rows.iter().filter(|r| r.fallback).count();
                if fallbacks > 0 {
                    st.note(format!("difficulty.{m}"), format!("{fallbacks} questions use the pooled effect"));
                }
                tables.push(t);
            }
            Err(e) => st.note(format!("difficulty.{m}"), e.to_string()),
        }
    }
    st.output("difficulty.csv", |p| io::write_difficulty(p, &tables))?;

    let mut rows: Vec<Vec<String>> = Vec::new();
    match pe::mean_endurance_fe(&panel) {
        Ok(e) => rows.push(position_row("all", &e, qpd, None)),
        Err(e) => st.note("position.fe", e.to_string()),
    }
    match adjusted_endurance(&responses, &design, &panel, ctx) {
        Ok(e) => rows.push(position_row("all", &e, qpd, None)),
        Err(e) => st.note("position.difficulty_adjusted", e),
    }
    let pairs = match pe::booklet_pair_deltas(&panel) {
        Ok(p) => {
            let e = p.as_estimate(panel.n_questions());
            rows.push(position_row("all", &e, qpd, Some((p.intercept, p.se_intercept))));
            Some(p)
        }
        Err(e) => {
            st.note("position.pairwise", e.to_string());
            None
        }
    };
    // Heterogeneity of the fixed-effects estimate.
    let split_table = tables
        .iter()
        .find(|t| t.method == DifficultyMethod::Pooled)
        .or_else(|| tables.iter().find(|t| t.method == DifficultyMethod::Raw));
    let mut partitions: Vec<(&str, HashMap<usize, String>)> = Vec::new();
    if let Some(t) = split_table {
        partitions.push(("difficulty", pe::partition_by_difficulty(t)));
    }
    partitions.push(("length", pe::partition_by_length(&design)));
    for (name, part) in &partitions {
        for (label, r) in pe::subgroup_position_effects(&panel, |row| part.get(&row.question).cloned()) {
            match r {
                Ok(e) => rows.push(position_row(&label, &e, qpd, None)),
                Err(e) => st.note(format!("position.{name}.{label}"), e.to_string()),
            }
        }
    }
    for (label, r) in pe::subgroup_position_effects(&panel, pe::day_half) {
        match r {
            Ok(e) => rows.push(position_row(&label, &e, qpd, None)),
            Err(e) => st.note(format!("position.day_half.{label}"), e.to_string()),
        }
    }
    st.output("position_effects.csv", |p| io::write_table(p, &POSITION_HEADER, rows))?;

    let pair_rows: Vec<Vec<String>> = pairs
        .iter()
        .flat_map(|p| &p.table)
        .map(|r| vec![r.delta_position.to_string(), fmt_f64(r.mean_delta_fraction), r.n_pairs.to_string()])
        .collect();
    st.output("pair_deltas.csv", |p| {
        io::write_table(p, &["delta_position", "mean_delta_fraction", "n_pairs"], pair_rows)
    })?;

    let nonresponse = pe::nonresponse_by_position(&responses).map_err(|e| err(&e))?;
    st.output("nonresponse.csv", |p| {
        io::write_table(
            p,
            &["day", "position", "n", "fraction_unanswered"],
            nonresponse.rows.iter().map(|r| {
                vec![(r.day + 1).to_string(), r.position.to_string(), r.n.to_string(), fmt_f64(r.fraction_unanswered)]
            }),
        )
    })?;
    let profile = pe::position_profile(&panel, &design);
    st.output("position_profile.csv", |p| {
        io::write_table(
            p,
            &["day", "position", "mean_fraction_correct"],
            profile.iter().map(|(d, pos, f)| vec![(d + 1).to_string(), pos.to_string(), fmt_f64(*f)]),
        )
    })?;
    st.finish()
}

/// The difficulty-adjusted design, cross-fitted when `holdout` is on.
fn adjusted_endurance(
    responses: &synth::ResponseMatrix,
    design: &synth::ExamDesign,
    panel: &pe::BookletPanel,
    ctx: &Context,
) -> std::result::Result<EnduranceEstimate, String> {
    let method = ctx.methods.adjustment;
    if ctx.config.methods.holdout {
        let folds: Vec<pe::BookletPanel> = (0..2)
            .map(|k| pe::build_booklet_panel_where(responses, design, |i| difficulty::holdout_fold(responses.student_ids[i]) == k))
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| e.to_string())?;
        // fold k is controlled with difficulty from the other fold
        difficulty::diffadj_endurance(&[(&folds[0], &folds[1]), (&folds[1], &folds[0])], method).map_err(|e| e.to_string())
    } else {
        difficulty::diffadj_endurance(&[(panel, panel)], method).map_err(|e| e.to_string())
    }
}

// ---------------------------------------------------------------------------
// decompose
// ---------------------------------------------------------------------------

pub fn cmd_decompose(ctx: &Context) -> Result<()> {
    let mut st = Stage::begin("decompose", ctx, false)?;
    let design = io::read_design(&st.input("design.csv")?)?;
    let responses = io::read_responses(&st.input("responses.csv")?, &design)?;
    let tables = io::read_difficulty(&st.input("difficulty.csv")?)?;
    let nq = design.n_questions();
    let method = ctx.methods.adjustment;
    let opts = DecomposeOptions {
        spec: ctx.methods.spec,
        demean: ctx.methods.demean,
    };

    // Tables estimated out of fold, reused for the previous sitting by id.
    let mut cross_fit: Option<[Vec<f64>; 2]> = None;
    let mut shared: Option<Vec<f64>> = None;
    if ctx.config.methods.decompose_with_difficulty {
        if ctx.config.methods.holdout {
            match difficulty::cross_fit_difficulty(&responses, &design, method) {
                Ok(cf) => cross_fit = Some([cf.tables[0].dense(nq), cf.tables[1].dense(nq)]),
                Err(e) => st.note("difficulty.holdout", format!("{e}; using the full-sample table")),
            }
        }
        if cross_fit.is_none() {
            let t = tables
                .iter()
                .find(|t| t.method == method)
                .or_else(|| {
                    st.note("difficulty", format!("no `{method}` rows in difficulty.csv; using `raw`"));
                    tables.iter().find(|t| t.method == DifficultyMethod::Raw)
                })
                .ok_or_else(|| CliError::MissingInput("difficulty.csv has no usable method".into()))?;
            shared = Some(t.dense(nq));
        }
    }
    let input_for = |m: &synth::ResponseMatrix| -> DifficultyInput {
        match (&cross_fit, &shared) {
            (Some(t), _) => DifficultyInput::CrossFit {
                tables: t.clone(),
                fold_of_row: m.student_ids.iter().map(|&id| difficulty::holdout_fold(id)).collect(),
            },
            (None, Some(d)) => DifficultyInput::Shared(d.clone()),
            _ => DifficultyInput::None,
        }
    };

    let est = decompose::decompose_cohort(&responses, &design, &input_for(&responses), opts);
    if est.rows.is_empty() {
        return Err(CliError::Stage {
            stage: "decompose",
            message: "no student meets the item floor".into(),
        });
    }
    st.output("estimates.csv", |p| io::write_estimates(p, &est))?;
    st.output("excluded.csv", |p| io::write_excluded(p, &est.excluded))?;
    let m = decompose::latent_moments(&est);
    if m.clamped {
        st.note("latent_moments", "sampling noise exceeds the raw variance; latent SD set to 0");
    }
    let moments = [
        ("n_students", est.rows.len().to_string()),
        ("n_excluded", est.excluded.len().to_string()),
        ("mean_alpha_hat", fmt_f64(m.mean_alpha_hat)),
        ("mean_beta_hat", fmt_f64(m.mean_beta_hat)),
        ("sd_alpha_hat_raw", fmt_f64(m.sd_alpha_hat_raw)),
        ("sd_beta_hat_raw", fmt_f64(m.sd_beta_hat_raw)),
        ("mean_se2_alpha", fmt_f64(m.mean_se2_alpha)),
        ("mean_se2_beta", fmt_f64(m.mean_se2_beta)),
        ("sd_alpha_latent", fmt_f64(m.sd_alpha_latent)),
        ("sd_beta_latent", fmt_f64(m.sd_beta_latent)),
    ];
    st.output("latent_moments.csv", |p| io::write_key_values(p, &moments))?;

    if let Some(prev_path) = st.optional_input("responses_prev.csv")? {
        let prev = io::read_responses(&prev_path, &design)?;
        let est_prev = decompose::decompose_cohort(&prev, &design, &input_for(&prev), opts);
        st.output("estimates_prev.csv", |p| io::write_estimates(p, &est_prev))?;
        match decompose::retest_reliability(&est_prev, &est) {
            Ok(rel) => {
                let bins = ctx.out.join("reliability_bins.csv");
                st.output("reliability.csv", |p| io::write_reliability(p, &bins, &rel))?;
                st.record.outputs.insert("reliability_bins.csv".into(), file_digest(&bins)?);
            }
            Err(e) => st.note("reliability", e.to_string()),
        }
    }
    st.finish()
}

// ---------------------------------------------------------------------------
// analyze
// ---------------------------------------------------------------------------

pub const SCORE_TOL: f64 = 1e-10;
pub const GAP_TOL: f64 = 1e-12;
pub const VALIDITY_TOL: f64 = 1e-10;

const RETURNS_HEADER: [&str; 9] = [
    "outcome",
    "estimator",
    "spec",
    "term",
    "estimate",
    "se",
    "n",
    "r_squared",
    "min_first_stage_f",
];

fn returns_rows(r: &ReturnsResult) -> Vec<Vec<String>> {
    let f = r.first_stage_f.iter().copied().fold(f64::NAN, f64::min);
    let row = |term: &str, est: f64, se: f64| {
        vec![
            r.outcome_label.clone(),
            r.estimator.to_string(),
            r.spec.label().to_string(),
            term.to_string(),
            fmt_f64(est),
            fmt_f64(se),
            r.n.to_string(),
            fmt_f64(r.r_squared),
            fmt_f64(f),
        ]
    };
    let mut out: Vec<Vec<String>> = r.coefficients.iter().map(|c| row(&c.label, c.estimate, c.se)).collect();
    if let Some(q) = &r.ratio {
        out.push(row("endurance_to_ability", q.value, q.se));
    }
    out
}

struct IdentityCheck {
    name: String,
    max_error: f64,
    tolerance: f64,
}

impl IdentityCheck {
    fn passed(&self) -> bool {
        self.max_error <= self.tolerance
    }
}

pub fn cmd_analyze(ctx: &Context, check_identities: bool) -> Result<()> {
    let err = stage_err("analyze");
    let mut st = Stage::begin("analyze", ctx, false)?;
    let mut est = io::read_estimates(&st.input("estimates.csv")?)?;
    let data = io::read_outcomes(&st.input("outcomes.csv")?)?;
    let design = io::read_design(&st.input("design.csv")?)?;
    let responses = io::read_responses(&st.input("responses.csv")?, &design)?;
    let previous = match st.optional_input("estimates_prev.csv")? {
        Some(p) => Some(io::read_estimates(&p)?),
        None => None,
    };
    let mut identities: Vec<IdentityCheck> = Vec::new();

    // Score identity on the full estimate set, before any filtering.
    let score_err = est
        .rows
        .iter()
        .map(|r| (r.fraction_correct - decompose::implied_score(r)).abs())
        .fold(0.0, f64::max);
    if !est.spec.has_score_identity() {
        st.note("identity.score", format!("not an exact identity under spec {}; check skipped", est.spec));
    } else if score_err.is_nan() || est.rows.iter().any(|r| r.fraction_correct.is_nan()) {
        st.note("identity.score", "estimates.csv lacks fraction_correct; check skipped");
    } else {
        identities.push(IdentityCheck {
            name: "score_identity".into(),
            max_error: score_err,
            tolerance: SCORE_TOL,
        });
    }

    if let Some(f) = ctx.methods.filter {
        let keep: std::collections::HashSet<u64> = decompose::apply_filter(&est, f).into_iter().collect();
        est.rows.retain(|r| keep.contains(&r.student_id));
        st.note("sample_filter", format!("{} students kept by {}", est.rows.len(), ctx.config.methods.sample_filter));
    }
    let moments = decompose::latent_moments(&est);
    let scale = match ctx.methods.scale {
        ScaleChoice::Sample => SkillScale::Sample,
        ScaleChoice::Latent => SkillScale::latent(&moments),
        ScaleChoice::Persistent => match &previous {
            Some(prev) => SkillScale::persistent(&est, prev).map_err(|e| err(&e))?,
            None => {
                st.note("skill_scale", "no previous sitting; using the latent scale");
                SkillScale::latent(&moments)
            }
        },
    };
    let shrunk = if ctx.config.methods.shrink_skills {
        Some(decompose::shrink_skill_estimates(&est, &moments).map_err(|e| err(&e))?)
    } else {
        None
    };
    let sample_for = |o: Outcome| -> SkillSample {
        let mut s = SkillSample::from_estimates(&est, &data.panel, o, ctx.config.methods.controls).with_finite_outcome();
        if ctx.config.methods.impute_missing_controls {
            s = s.impute_missing_controls();
        }
        if ctx.config.methods.precision_weights {
            s = s.with_precision_weights();
        }
        if let Some(sh) = &shrunk {
            s = s.with_skills(&sh.student_id, &sh.alpha_s, &sh.beta_s);
        }
        s
    };

    // Returns.
    let mut returns: Vec<Vec<String>> = Vec::new();
    let mut deciles: Vec<Vec<String>> = Vec::new();
    for &o in &ctx.methods.outcomes {
        let s = sample_for(o);
        for spec in [ReturnsSpec::ScoreOnly, ReturnsSpec::Skills] {
            match analysis::returns_ols(&s, spec, scale) {
                Ok(r) => returns.extend(returns_rows(&r)),
                Err(e) => st.note(format!("returns.{o}.{}", spec.label()), e.to_string()),
            }
        }
        if let Some(prev) = &previous {
            match analysis::returns_iv(&s, prev, scale) {
                Ok(r) => {
                    if r.weak_instruments() {
                        st.note(format!("returns.{o}.iv"), "first-stage F below 10");
                    }
                    returns.extend(returns_rows(&r));
                }
                Err(e) => st.note(format!("returns.{o}.iv"), e.to_string()),
            }
        }
        match analysis::returns_decile(&s, ReturnsSpec::Skills) {
            Ok(d) => deciles.extend(d.effects.iter().map(|e| {
                vec![
                    o.label().to_string(),
                    e.skill.clone(),
                    e.decile.to_string(),
                    fmt_f64(e.estimate),
                    fmt_f64(e.se),
                ]
            })),
            Err(e) => st.note(format!("returns_decile.{o}"), e.to_string()),
        }
    }
    st.output("returns.csv", |p| io::write_table(p, &RETURNS_HEADER, returns))?;
    st.output("returns_decile.csv", |p| {
        io::write_table(p, &["outcome", "skill", "decile", "estimate", "se"], deciles)
    })?;

    // Returns by degree, occupation and industry (log wage).
    let wage = sample_for(Outcome::LogWage);
    let mut group_rows = Vec::new();
    let mut group_summary = Vec::new();
    let panel = &data.panel;
    for (field, ids) in [
        ("degree", &panel.degree_id),
        ("occupation", &panel.occupation_id),
        ("industry", &panel.industry_id),
    ] {
        let map: HashMap<u64, u32> = panel
            .student_ids
            .iter()
            .zip(ids.iter())
            .filter(|(_, g)| **g != u32::MAX)
            .map(|(&s, &g)| (s, g))
            .collect();
        if map.is_empty() {
            st.note(format!("group_returns.{field}"), "no identifiers in outcomes.csv");
            continue;
        }
        match analysis::group_returns(&wage, &map, ctx.config.methods.group_min_n, scale) {
            Ok(g) => {
                group_rows.extend(g.rows.iter().map(|r| {
                    vec![
                        field.to_string(),
                        r.group.to_string(),
                        r.n.to_string(),
                        fmt_f64(r.mean_outcome),
                        fmt_f64(r.outcome_percentile),
                        fmt_f64(r.psi_a),
                        fmt_f64(r.se_a),
                        fmt_f64(r.psi_e),
                        fmt_f64(r.se_e),
                    ]
                }));
                group_summary.push(vec![
                    field.to_string(),
                    g.rows.len().to_string(),
                    g.skipped.len().to_string(),
                    fmt_f64(g.slope_psi_e.0),
                    fmt_f64(g.slope_psi_e.1),
                    fmt_f64(g.overdispersion.0),
                    g.overdispersion.1.to_string(),
                    fmt_f64(g.overdispersion.2),
                ]);
            }
            Err(e) => st.note(format!("group_returns.{field}"), e.to_string()),
        }
    }
    st.output("group_returns.csv", |p| {
        io::write_table(
            p,
            &["field", "group", "n", "mean_outcome", "outcome_percentile", "psi_a", "se_a", "psi_e", "se_e"],
            group_rows,
        )
    })?;
    st.output("group_returns_summary.csv", |p| {
        io::write_table(
            p,
            &["field", "n_groups", "n_skipped", "slope_psi_e", "se_slope", "chi2", "df", "p_value"],
            group_summary,
        )
    })?;

    // Group gaps and the exam-length reform.
    let mean_posnorm = est.rows.iter().map(|r| r.mean_posnorm).sum::<f64>() / est.rows.len().max(1) as f64;
    let wanted = &ctx.config.methods.gap_groups;
    let mut gap_rows = Vec::new();
    if data.groups.is_empty() {
        st.note("gaps", "no group flags in outcomes.csv; gaps skipped");
    }
    for g in wanted {
        if !data.groups.iter().any(|(n, _)| n == g) {
            st.note(format!("gaps.{g}"), "group flag not present in outcomes.csv; skipped");
        }
    }
    for (name, flags) in &data.groups {
        if !wanted.is_empty() && !wanted.contains(name) {
            continue;
        }
        let map: HashMap<u64, bool> = panel
            .student_ids
            .iter()
            .zip(flags)
            .filter_map(|(&id, f)| f.map(|f| (id, f)))
            .collect();
        for variant in [GapVariant::Unconditional, GapVariant::RegressionAdjusted] {
            match analysis::gap_decomposition(&est, name, &map, mean_posnorm, variant) {
                Ok(r) => {
                    if variant == GapVariant::Unconditional {
                        identities.push(IdentityCheck {
                            name: format!("gap_sum.{name}"),
                            max_error: (r.score_gap - r.ability_component - r.endurance_component).abs(),
                            tolerance: GAP_TOL,
                        });
                    }
                    identities.push(IdentityCheck {
                        name: format!("reform_half.{name}.{variant}"),
                        max_error: (r.reform_delta_pp + 0.5 * r.endurance_component).abs(),
                        tolerance: 0.0,
                    });
                    gap_rows.push(vec![
                        name.clone(),
                        variant.label().to_string(),
                        r.n_group1.to_string(),
                        r.n_group0.to_string(),
                        fmt_f64(r.mean_posnorm),
                        fmt_f64(r.score_gap),
                        fmt_f64(r.se_score_gap),
                        fmt_f64(r.ability_component),
                        fmt_f64(r.se_ability),
                        fmt_f64(r.endurance_component),
                        fmt_f64(r.se_endurance),
                        fmt_f64(r.reform_delta_pp),
                        fmt_opt(r.reform_delta_pct),
                    ]);
                }
                Err(e) => st.note(format!("gaps.{name}.{variant}"), e.to_string()),
            }
        }
    }
    st.output("gaps.csv", |p| {
        io::write_table(
            p,
            &[
                "group",
                "variant",
                "n_group1",
                "n_group0",
                "mean_posnorm",
                "score_gap",
                "se_score_gap",
                "ability_component",
                "se_ability",
                "endurance_component",
                "se_endurance",
                "reform_delta_pp",
                "reform_delta_pct",
            ],
            gap_rows,
        )
    })?;

    // Question validity.
    let index: HashMap<u64, usize> = panel.student_ids.iter().enumerate().map(|(i, &id)| (id, i)).collect();
    let mut validity_rows = Vec::new();
    let mut reform_rows = Vec::new();
    for &o in &ctx.methods.outcomes {
        let values = o.values(panel);
        let y: Vec<f64> = responses
            .student_ids
            .iter()
            .map(|id| index.get(id).map_or(f64::NAN, |&i| values[i]))
            .collect();
        match analysis::validity_aggregation_check(&responses, &y) {
            Ok(gap) => identities.push(IdentityCheck {
                name: format!("validity_aggregation.{o}"),
                max_error: gap,
                tolerance: VALIDITY_TOL,
            }),
            Err(e) => st.note(format!("identity.validity.{o}"), e.to_string()),
        }
        let table = match analysis::question_validity(
            &responses,
            ValidityTarget::External(&y),
            o.label(),
            ctx.config.methods.validity_min_cell,
        ) {
            Ok(t) => t,
            Err(e) => {
                st.note(format!("validity.{o}"), e.to_string());
                continue;
            }
        };
        if table.skipped > 0 {
            st.note(format!("validity.{o}"), format!("{} small or constant cells skipped", table.skipped));
        }
        validity_rows.extend(table.rows.iter().map(|r| {
            vec![
                o.label().to_string(),
                (r.question + 1).to_string(),
                (r.booklet as usize + 1).to_string(),
                r.position.to_string(),
                r.n.to_string(),
                fmt_f64(r.rho),
                fmt_f64(r.se_rho),
            ]
        }));
        match analysis::validity_reform_regression(&table) {
            Ok(r) => reform_rows.push(vec![
                o.label().to_string(),
                fmt_f64(r.coef_per_position),
                fmt_f64(r.se_coef),
                fmt_f64(r.mean_position),
                fmt_f64(r.gamma_reform),
                fmt_f64(r.se_gamma),
                fmt_f64(r.mean_validity),
                fmt_f64(r.pct_change),
                r.n_cells.to_string(),
            ]),
            Err(e) => st.note(format!("validity_reform.{o}"), e.to_string()),
        }
    }
    st.output("validity.csv", |p| {
        io::write_table(p, &["outcome", "question_id", "booklet", "position", "n", "rho", "se_rho"], validity_rows)
    })?;
    st.output("validity_reform.csv", |p| {
        io::write_table(
            p,
            &[
                "outcome",
                "coef_per_position",
                "se_coef",
                "mean_position",
                "gamma_reform",
                "se_gamma",
                "mean_validity",
                "pct_change",
                "n_cells",
            ],
            reform_rows,
        )
    })?;

    let failed: Vec<String> = identities.iter().filter(|c| !c.passed()).map(|c| c.name.clone()).collect();
    st.output("identities.csv", |p| {
        io::write_table(
            p,
            &["identity", "max_abs_error", "tolerance", "pass"],
            identities.iter().map(|c| {
                vec![c.name.clone(), fmt_f64(c.max_error), fmt_f64(c.tolerance), io::fmt_bool(c.passed())]
            }),
        )
    })?;
    let summary = build_summary(&ctx.out)?;
    st.output("summary.md", |p| {
        std::fs::write(p, summary).map_err(|e| IoError::Io {
            path: p.to_path_buf(),
            message: e.to_string(),
        })
    })?;
    st.finish()?;
    if check_identities && !failed.is_empty() {
        return Err(CliError::IdentityFailure(failed.join(", ")));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// report
// ---------------------------------------------------------------------------

/// Published magnitudes, shown next to the simulated statistics. They are
/// targets for the shape of the results only: the simulator is calibrated
/// to them, it does not reproduce them.
const REFERENCES: &[(&str, &str)] = &[
    ("position.fe", "-0.072"),
    ("position.difficulty_adjusted", "-0.058"),
    ("position.pairwise", "-0.058 to -0.072, intercept 0"),
    ("r_alpha", "0.61 to 0.77"),
    ("r_beta", "0.14 to 0.30"),
    ("returns.log_wage.ability", "0.154"),
    ("returns.log_wage.endurance", "0.054"),
    ("returns.ratio", "0.255 to 0.387"),
    ("validity.pct_change", "+0.75 to +0.95"),
];

fn reference(key: &str) -> &'static str {
    REFERENCES.iter().find(|(k, _)| *k == key).map_or("", |(_, v)| v)
}

fn read_if(dir: &Path, name: &str) -> Result<Option<Table>> {
    let p = dir.join(name);
    if p.exists() {
        Ok(Some(Table::read(&p)?))
    } else {
        Ok(None)
    }
}

fn num(s: &str) -> String {
    if s.parse::<i64>().is_ok() {
        return s.to_string();
    }
    match s.parse::<f64>() {
        Ok(v) if v.is_finite() => format!("{v:.4}"),
        _ => s.to_string(),
    }
}

/// Markdown summary of every headline statistic found in `dir`.
pub fn build_summary(dir: &Path) -> Result<String> {
    let mut md = String::from("# Run summary\n\n");
    md.push_str(
        "Reference magnitudes are published values the simulator is calibrated toward. \
         They indicate the expected shape of each result, not a value to reproduce.\n",
    );
    let mut section = |title: &str, rows: Vec<(String, String, &'static str)>| {
        if rows.is_empty() {
            return;
        }
        let _ = write!(md, "\n## {title}\n\n| statistic | value | reference (shape only) |\n|---|---|---|\n");
        for (k, v, r) in rows {
            let _ = writeln!(md, "| {k} | {v} | {r} |");
        }
    };

    if let Some(t) = read_if(dir, "position_effects.csv")? {
        let mut rows = Vec::new();
        for r in t.rows() {
            if r.str("subgroup")? != "all" {
                continue;
            }
            let design = r.str("design")?.to_string();
            rows.push((
                format!("daily position effect ({design})"),
                format!("{} (se {})", num(r.str("beta_daily")?), num(r.str("se")?)),
                reference(&format!("position.{design}")),
            ));
            if design == "pairwise" {
                rows.push((
                    "pairwise intercept".into(),
                    format!("{} (se {})", num(r.str("intercept")?), num(r.str("se_intercept")?)),
                    "0",
                ));
            }
        }
        section("Mean endurance", rows);
    }
    if let Some(t) = read_if(dir, "latent_moments.csv")? {
        let rows = t
            .rows()
            .map(|r| Ok((r.str("statistic")?.to_string(), num(r.str("value")?), "")))
            .collect::<io::Result<Vec<_>>>()?;
        section("Skill estimates", rows);
    }
    if let Some(t) = read_if(dir, "reliability.csv")? {
        let mut rows = Vec::new();
        for r in t.rows() {
            rows.push(("test-retest r (ability)".into(), num(r.str("r_alpha")?), reference("r_alpha")));
            rows.push(("test-retest r (endurance)".into(), num(r.str("r_beta")?), reference("r_beta")));
            rows.push(("matched students".into(), r.str("n_matched")?.to_string(), ""));
        }
        section("Reliability", rows);
    }
    if let Some(t) = read_if(dir, "returns.csv")? {
        let mut rows = Vec::new();
        for r in t.rows() {
            if r.str("spec")? != "skills" {
                continue;
            }
            let (o, e, term) = (r.str("outcome")?, r.str("estimator")?, r.str("term")?);
            let refkey = match term {
                "endurance_to_ability" => "returns.ratio".to_string(),
                _ => format!("returns.{o}.{term}"),
            };
            let f = r.str("min_first_stage_f")?;
            let extra = if f.is_empty() { String::new() } else { format!(", first-stage F {}", num(f)) };
            rows.push((
                format!("{o}: {term} ({e})"),
                format!("{} (se {}){extra}", num(r.str("estimate")?), num(r.str("se")?)),
                reference(&refkey),
            ));
        }
        section("Returns per SD of skill", rows);
    }
    if let Some(t) = read_if(dir, "gaps.csv")? {
        let mut rows = Vec::new();
        for r in t.rows() {
            let g = format!("{} ({})", r.str("group")?, r.str("variant")?);
            rows.push((format!("{g}: score gap"), num(r.str("score_gap")?), ""));
            rows.push((format!("{g}: ability part"), num(r.str("ability_component")?), ""));
            rows.push((format!("{g}: endurance part"), num(r.str("endurance_component")?), ""));
            rows.push((
                format!("{g}: change from halving the exam"),
                format!("{} ({} of the gap)", num(r.str("reform_delta_pp")?), num(r.str("reform_delta_pct")?)),
                "",
            ));
        }
        section("Group gaps", rows);
    }
    if let Some(t) = read_if(dir, "validity_reform.csv")? {
        let mut rows = Vec::new();
        for r in t.rows() {
            let o = r.str("outcome")?;
            rows.push((
                format!("{o}: validity gain from halving"),
                format!("{} (se {})", num(r.str("gamma_reform")?), num(r.str("se_gamma")?)),
                "",
            ));
            rows.push((
                format!("{o}: relative gain"),
                num(r.str("pct_change")?),
                reference("validity.pct_change"),
            ));
        }
        section("Predictive validity", rows);
    }
    if let Some(t) = read_if(dir, "identities.csv")? {
        let rows = t
            .rows()
            .map(|r| {
                let pass = if r.str("pass")? == "1" { "pass" } else { "FAIL" };
                Ok((
                    r.str("identity")?.to_string(),
                    format!("{pass} (max error {}, tolerance {})", r.str("max_abs_error")?, r.str("tolerance")?),
                    "",
                ))
            })
            .collect::<io::Result<Vec<_>>>()?;
        section("Exact identities", rows);
    }
    Ok(md)
}

pub fn cmd_report(ctx: &Context) -> Result<()> {
    let mut st = Stage::begin("report", ctx, false)?;
    for name in [
        "position_effects.csv",
        "latent_moments.csv",
        "reliability.csv",
        "returns.csv",
        "gaps.csv",
        "validity_reform.csv",
        "identities.csv",
    ] {
        st.optional_input(name)?;
    }
    let summary = build_summary(&ctx.out)?;
    st.output("summary.md", |p| {
        std::fs::write(p, summary).map_err(|e| IoError::Io {
            path: p.to_path_buf(),
            message: e.to_string(),
        })
    })?;
    st.finish()
}

// ---------------------------------------------------------------------------
// check
// ---------------------------------------------------------------------------

pub fn cmd_check(ctx: &Context, check_identities: bool) -> Result<()> {
    if let Some(m) = RunManifest::load(&ctx.out)? {
        let bad = m.verify(&ctx.out)?;
        if !bad.is_empty() {
            return Err(CliError::IdentityFailure(format!("digest mismatch for {}", bad.join(", "))));
        }
    }
    if check_identities {
        let p = ctx.out.join("identities.csv");
        let t = Table::read(&p)?;
        let mut failed = Vec::new();
        for r in t.rows() {
            if !r.bool("pass")? {
                failed.push(r.str("identity")?.to_string());
            }
        }
        if !failed.is_empty() {
            return Err(CliError::IdentityFailure(failed.join(", ")));
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Entry points
// ---------------------------------------------------------------------------

/// Loads the configuration, applies the command-line overrides and runs
/// the command.
pub fn run(cli: &Cli) -> Result<()> {
    let mut config = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        config.seed = Some(s);
    }
    if let Some(o) = &cli.out {
        config.output.dir = o.clone();
    }
    let ctx = Context::new(config)?;
    match &cli.command {
        Command::Simulate => cmd_simulate(&ctx),
        Command::Estimate => cmd_estimate(&ctx),
        Command::Decompose => cmd_decompose(&ctx),
        Command::Analyze { check_identities } => cmd_analyze(&ctx, *check_identities),
        Command::Report => cmd_report(&ctx),
        Command::Check { check_identities } => cmd_check(&ctx, *check_identities),
        Command::Run { check_identities } => {
            cmd_simulate(&ctx)?;
            cmd_estimate(&ctx)?;
            cmd_decompose(&ctx)?;
            cmd_analyze(&ctx, *check_identities)
        }
    }
}

/// Runs `cli` inside a thread pool sized by `ENDURANCE_THREADS` (all cores
/// when unset) and returns the process exit code.
pub fn main_with(cli: Cli) -> i32 {
    let threads = match std::env::var(THREADS_ENV) {
        Ok(v) => match v.parse::<usize>() {
            Ok(n) => n,
            Err(_) => {
                eprintln!("error: {THREADS_ENV} must be a nonnegative integer, got `{v}`");
                return 2;
            }
        },
        Err(_) => 0,
    };
    let pool = match rayon::ThreadPoolBuilder::new().num_threads(threads).build() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: {e}");
            return 1;
        }
    };
    match pool.install(|| run(&cli)) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn main() -> i32 {
    main_with(Cli::parse())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_are_rejected() {
        let e = RunConfig::from_toml("seed = 1\n[cohort]\nn_student = 5\n").unwrap_err();
        assert!(e.to_string().contains("n_student"), "{e}");
        assert_eq!(e.exit_code(), 2);
    }

    #[test]
    fn missing_seed_names_the_field() {
        let c = RunConfig::from_toml("[cohort]\nn_students = 5\n").unwrap();
        let e = c.require_seed().unwrap_err();
        assert!(e.to_string().contains("seed"));
    }

    #[test]
    fn empty_cohort_is_a_config_error() {
        let c = RunConfig::from_toml("seed = 1\n[cohort]\nn_students = 0\n").unwrap();
        assert_eq!(c.methods().unwrap_err().exit_code(), 2);
    }

    #[test]
    fn unknown_methods_are_config_errors() {
        for text in [
            "[methods]\ndifficulty = \"irt\"\n",
            "[methods]\nspec = \"quadratic\"\n",
            "[methods]\nskill_scale = \"huge\"\n",
            "[response]\nmodel = \"logit\"\n",
        ] {
            let c = RunConfig::from_toml(text).unwrap();
            assert_eq!(c.methods().unwrap_err().exit_code(), 2, "{text}");
        }
    }

    #[test]
    fn config_digest_tracks_content() {
        let a = RunConfig::default();
        let mut b = a.clone();
        assert_eq!(a.digest(), b.digest());
        b.seed = Some(3);
        assert_ne!(a.digest(), b.digest());
    }
}
