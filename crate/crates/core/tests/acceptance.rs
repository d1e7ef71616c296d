//! Acceptance criteria. Every test writes one `PASS`/`FAIL` line straight
//! to stdout (so it shows without `--nocapture`) and then asserts.
//!
//! Seeds are fixed in advance; the bounds below are the criteria, not
//! values tuned to the seeds.

mod common;

use std::collections::{BTreeMap, HashMap};
use std::io::Write;
use std::path::Path;
use std::sync::OnceLock;
use std::time::Instant;

use clap::Parser;
use endurance::analysis::*;
use endurance::cli::{self, Cli};
use endurance::decompose::*;
use endurance::difficulty::*;
use endurance::position_effects::*;
use endurance::regress::{self, DesignMatrix, INTERCEPT};
use endurance::synth::*;

const SEED: u64 = 20_240_601;
const TRUE_DAILY_BETA: f64 = -0.058;
/// The command-line default.
const DIFFICULTY_SD: f64 = 0.05;

// 1
const MEAN_BETA_TOL: f64 = 0.005;
const ESTIMATOR_AGREEMENT: f64 = 0.01;
const MAX_RUNTIME_SECS: f64 = 60.0;
// 2
const PAIR_INTERCEPT_SES: f64 = 2.0;
const PAIR_SLOPE_TOL: f64 = 0.01;
// 3, 4
const CLOSED_FORM_TOL: f64 = 1e-12;
const SCORE_IDENTITY_TOL: f64 = 1e-10;
// 5
const VARIANCE_SEEDS: u64 = 20;
const VARIANCE_MIN_WINS: usize = 19;
// 6
const GAP_SUM_TOL: f64 = 1e-12;
const GAP_COMPONENT_TOL: f64 = 0.003;
// 7
const AGGREGATION_TOL: f64 = 1e-10;
const REFORM_MIN_T: f64 = 2.0;
// 8
const IV_SEEDS: u64 = 20;
const IV_MIN_WINS: usize = 18;
const TRUE_PSI_E: f64 = 0.054;
// 9
const RELIABILITY_SEEDS: u64 = 10;
const R_BETA_RANGE: (f64, f64) = (0.10, 0.35);
const R_ALPHA_RANGE: (f64, f64) = (0.55, 0.85);
// 10
const SANDWICH_TOL: f64 = 1e-12;
const BOOTSTRAP_REL_TOL: f64 = 0.02;
const THREE_PL_TOL: f64 = 1e-9;

fn report(criterion: u32, pass: bool, text: String) -> bool {
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "acceptance {criterion:>2} {} {text}", if pass { "PASS" } else { "FAIL" });
    pass
}

fn pool(threads: usize) -> rayon::ThreadPool {
    rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap()
}

/// Default design, population, difficulties and one sitting.
fn cohort(n: usize, latent: &LatentConfig, seed: u64) -> (ExamDesign, LatentPopulation, Vec<f64>, ResponseMatrix) {
    let design = build_design(&DesignConfig::default(), seed).unwrap();
    let pop = draw_population(n, latent, seed).unwrap();
    let diff = draw_item_difficulty(design.n_questions(), DIFFICULTY_SD, seed);
    let responses = simulate_responses(&design, &pop, &diff, &ResponseConfig::default(), seed).unwrap();
    (design, pop, diff, responses)
}

fn cross_fit(responses: &ResponseMatrix, design: &ExamDesign) -> CrossFitDifficulty {
    cross_fit_difficulty(responses, design, DifficultyMethod::Pooled).unwrap()
}

fn decompose(responses: &ResponseMatrix, design: &ExamDesign, cf: &CrossFitDifficulty) -> SkillEstimates {
    let input = DifficultyInput::from_cross_fit(cf, design.n_questions());
    decompose_cohort(responses, design, &input, DecomposeOptions::default())
}

#[test]
fn criterion_01_mean_endurance_recovery() {
    let start = Instant::now();
    let (fe, da) = pool(1).install(|| {
        let (design, _, _, responses) = cohort(20_000, &LatentConfig::default(), SEED);
        let panel = build_booklet_panel(&responses, &design).unwrap();
        let fe = mean_endurance_fe(&panel).unwrap();
        let folds: Vec<BookletPanel> = (0..2)
            .map(|k| {
                build_booklet_panel_where(&responses, &design, |i| holdout_fold(responses.student_ids[i]) == k).unwrap()
            })
            .collect();
        let da = diffadj_endurance(&[(&folds[0], &folds[1]), (&folds[1], &folds[0])], DifficultyMethod::Pooled).unwrap();
        (fe, da)
    });
    let secs = start.elapsed().as_secs_f64();
    let (b_fe, b_da) = (fe.beta_daily, da.beta_daily);
    let pass = (b_fe - TRUE_DAILY_BETA).abs() <= MEAN_BETA_TOL
        && (b_da - TRUE_DAILY_BETA).abs() <= MEAN_BETA_TOL
        && (b_fe - b_da).abs() <= ESTIMATOR_AGREEMENT
        && secs <= MAX_RUNTIME_SECS;
    assert!(report(
        1,
        pass,
        format!(
            "question FE {b_fe:.4} (se {:.4}), difficulty-adjusted {b_da:.4} (se {:.4}) vs true {TRUE_DAILY_BETA} (±{MEAN_BETA_TOL}); \
             gap {:.4} (≤{ESTIMATOR_AGREEMENT}); {secs:.1}s on one thread (≤{MAX_RUNTIME_SECS}s)",
            fe.se,
            da.se,
            (b_fe - b_da).abs()
        )
    ));
}

#[test]
fn criterion_02_pairwise_booklets() {
    let (design, _, _, responses) = cohort(20_000, &LatentConfig::default(), SEED);
    let panel = build_booklet_panel(&responses, &design).unwrap();
    let pd = booklet_pair_deltas(&panel).unwrap();
    let beta = pd.beta_daily();
    let t = pd.intercept / pd.se_intercept;
    let pass = t.abs() <= PAIR_INTERCEPT_SES && (beta - TRUE_DAILY_BETA).abs() <= PAIR_SLOPE_TOL;
    assert!(report(
        2,
        pass,
        format!(
            "intercept {:.5} (se {:.5}, |t| {:.2} ≤ {PAIR_INTERCEPT_SES}); slope×(Q−1) {beta:.4} vs {TRUE_DAILY_BETA} (±{PAIR_SLOPE_TOL})",
            pd.intercept,
            pd.se_intercept,
            t.abs()
        )
    ));
}

#[test]
fn criterion_03_closed_form_equals_ols() {
    let (design, _, _, responses) = cohort(1_000, &LatentConfig::default(), SEED + 3);
    let mut worst: f64 = 0.0;
    for i in 0..responses.n_students() {
        let cells = responses.student(i);
        let pos: Vec<f64> = cells.iter().map(|c| responses.pos_norm(c)).collect();
        let correct: Vec<f64> = cells.iter().map(|c| c.correct() as u8 as f64).collect();
        let (a, b) = closed_form_coefficients(&pos, &correct).unwrap();
        let x = DesignMatrix::from_columns(vec![("pos", pos)]).unwrap().with_intercept().unwrap();
        let fit = regress::ols_fit(&x, &correct, None).unwrap();
        let row = decompose_student(responses.student_ids[i], cells, &design, None, DecomposeOptions::default()).unwrap();
        for d in [
            a - fit.coef(INTERCEPT).unwrap(),
            b - fit.coef("pos").unwrap(),
            a - row.alpha_hat,
            b - row.beta_hat,
        ] {
            worst = worst.max(d.abs());
        }
    }
    assert!(report(
        3,
        worst <= CLOSED_FORM_TOL,
        format!("1000 students, largest |closed form − OLS| {worst:.2e} (≤{CLOSED_FORM_TOL:e})")
    ));
}

#[test]
fn criterion_04_score_identity() {
    let (design, _, _, responses) = cohort(20_000, &LatentConfig::default(), SEED + 4);
    let cf = cross_fit(&responses, &design);
    let mut worst: f64 = 0.0;
    let mut n = 0;
    let inputs = [
        DifficultyInput::None,
        DifficultyInput::from_cross_fit(&cf, design.n_questions()),
        DifficultyInput::from_table(&cf.tables[0], design.n_questions()),
    ];
    for input in &inputs {
        for spec in Spec::ALL.into_iter().filter(Spec::has_score_identity) {
            for demean in [Demean::PerBooklet, Demean::Global] {
                let est = decompose_cohort(&responses, &design, input, DecomposeOptions { spec, demean });
                for r in &est.rows {
                    worst = worst.max((r.fraction_correct - implied_score(r)).abs());
                    n += 1;
                }
            }
        }
    }
    assert!(report(
        4,
        worst <= SCORE_IDENTITY_TOL,
        format!(
            "{n} student fits (baseline, day and subject intercepts; with and without difficulty), \
             largest |score − implied| {worst:.2e} (≤{SCORE_IDENTITY_TOL:e})"
        )
    ));
}

#[test]
fn criterion_05_variance_correction_and_shrinkage() {
    let sigma_beta = LatentConfig::default().sd_beta;
    let results: Vec<(bool, bool)> = (0..VARIANCE_SEEDS)
        .map(|s| {
            let seed = SEED + 100 + s;
            let (design, pop, _, responses) = cohort(10_000, &LatentConfig::default(), seed);
            let est = decompose(&responses, &design, &cross_fit(&responses, &design));
            let m = latent_moments(&est);
            let sd_win = (m.sd_beta_latent - sigma_beta).abs() < (m.sd_beta_hat_raw - sigma_beta).abs();
            let shrunk = shrink_skill_estimates(&est, &m).unwrap();
            let truth: Vec<f64> = est.rows.iter().map(|r| pop.beta[r.student_id as usize]).collect();
            let mse = |v: &[f64]| v.iter().zip(&truth).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / v.len() as f64;
            (sd_win, mse(&shrunk.beta_s) < mse(&est.beta()))
        })
        .collect();
    let sd_wins = results.iter().filter(|r| r.0).count();
    let mse_wins = results.iter().filter(|r| r.1).count();
    let pass = sd_wins >= VARIANCE_MIN_WINS && mse_wins >= VARIANCE_MIN_WINS;
    assert!(report(
        5,
        pass,
        format!(
            "latent SD closer to σ_β in {sd_wins}/{VARIANCE_SEEDS}, shrunk MSE lower in {mse_wins}/{VARIANCE_SEEDS} (need {VARIANCE_MIN_WINS})"
        )
    ));
}

#[test]
fn criterion_06_gap_decomposition() {
    let latent = LatentConfig {
        groups: vec![GroupShift {
            name: "flag".into(),
            share: 0.5,
            delta_alpha: 0.03,
            delta_beta: -0.02,
        }],
        ..Default::default()
    };
    let (design, pop, _, responses) = cohort(50_000, &latent, SEED + 6);
    let est = decompose(&responses, &design, &cross_fit(&responses, &design));
    let flags = pop.group("flag").unwrap();
    let in_group: HashMap<u64, bool> = pop.student_ids.iter().zip(flags).map(|(&id, &f)| (id, f)).collect();
    let g = gap_decomposition(&est, "flag", &in_group, 0.5, GapVariant::Unconditional).unwrap();
    let sum_gap = (g.ability_component + g.endurance_component - g.score_gap).abs();
    let reform_exact = g.reform_delta_pp == -0.5 * g.endurance_component;
    let pass = sum_gap <= GAP_SUM_TOL
        && (g.ability_component - 0.03).abs() <= GAP_COMPONENT_TOL
        && (g.endurance_component - (-0.02 * 0.5)).abs() <= GAP_COMPONENT_TOL
        && reform_exact;
    assert!(report(
        6,
        pass,
        format!(
            "|components − gap| {sum_gap:.1e} (≤{GAP_SUM_TOL:e}); ability {:.4} vs 0.030, endurance {:.4} vs −0.010 (±{GAP_COMPONENT_TOL}); \
             reform {:.5} = −½×endurance: {reform_exact}",
            g.ability_component, g.endurance_component, g.reform_delta_pp
        )
    ));
}

#[test]
fn criterion_07_predictive_validity() {
    let n = 50_000;
    let seed = SEED + 7;
    let design = build_design(&DesignConfig::default(), seed).unwrap();
    let pop = draw_population(n, &LatentConfig::default(), seed).unwrap();
    let outcomes = OutcomeConfig {
        psi_e: 0.0,
        ..Default::default()
    };
    let panel = simulate_outcomes(&pop, &outcomes, seed).unwrap();
    let cfg = ResponseConfig {
        model: ResponseModel::ThreePl {
            items: draw_item_params(design.n_questions(), 1.5, 0.5, 0.2, seed),
            scale: 10.0,
            center: 0.373,
        },
        ..Default::default()
    };
    let diff = draw_item_difficulty(design.n_questions(), DIFFICULTY_SD, seed);
    let responses = simulate_responses(&design, &pop, &diff, &cfg, seed).unwrap();
    let y = &panel.log_wage;
    let worst = validity_aggregation_check(&responses, y).unwrap();
    let table = question_validity(&responses, ValidityTarget::External(y), "log_wage", DEFAULT_MIN_CELL).unwrap();
    let reform = validity_reform_regression(&table).unwrap();
    let t = reform.gamma_reform / reform.se_gamma;
    let pass = worst <= AGGREGATION_TOL && reform.gamma_reform > 0.0 && t.abs() > REFORM_MIN_T;
    assert!(report(
        7,
        pass,
        format!(
            "aggregation gap {worst:.1e} (≤{AGGREGATION_TOL:e}); gamma_reform {:.5} (se {:.5}, t {t:.2} > {REFORM_MIN_T}), {:.0}% of mean validity",
            reform.gamma_reform,
            reform.se_gamma,
            100.0 * reform.pct_change
        )
    ));
}

/// Per seed: (psi_E by OLS, by IV, smallest first-stage F, r_alpha, r_beta).
fn retest_runs() -> &'static BTreeMap<u64, (f64, f64, f64, f64, f64)> {
    static RUNS: OnceLock<BTreeMap<u64, (f64, f64, f64, f64, f64)>> = OnceLock::new();
    RUNS.get_or_init(|| {
        (0..IV_SEEDS.max(RELIABILITY_SEEDS))
            .map(|s| {
                let seed = SEED + 200 + s;
                let design = build_design(&DesignConfig::default(), seed).unwrap();
                let pop = draw_population(20_000, &LatentConfig::default(), seed).unwrap();
                let diff = draw_item_difficulty(design.n_questions(), DIFFICULTY_SD, seed);
                let (prev, cur) = simulate_retest(
                    &pop,
                    &design,
                    &diff,
                    &ResponseConfig::default(),
                    &RetestConfig::default(),
                    seed,
                )
                .unwrap();
                let panel = simulate_outcomes(&pop, &OutcomeConfig::default(), seed).unwrap();
                let cf = cross_fit(&cur, &design);
                let e1 = decompose(&cur, &design, &cf);
                let e0 = decompose(&prev, &design, &cf);
                let rel = retest_reliability(&e0, &e1).unwrap();
                let sample = SkillSample::from_estimates(&e1, &panel, Outcome::LogWage, true);
                let scale = SkillScale::persistent(&e1, &e0).unwrap();
                let ols = returns_ols(&sample, ReturnsSpec::Skills, scale).unwrap();
                let iv = returns_iv(&sample, &e0, scale).unwrap();
                let min_f = iv.first_stage_f.iter().copied().fold(f64::INFINITY, f64::min);
                (seed, (ols.psi(ENDURANCE), iv.psi(ENDURANCE), min_f, rel.r_alpha, rel.r_beta))
            })
            .collect()
    })
}

#[test]
fn criterion_08_iv_beats_ols() {
    let runs = retest_runs();
    let mut wins = 0;
    let (mut ols_sum, mut iv_sum, mut min_f) = (0.0, 0.0, f64::INFINITY);
    for (ols, iv, f, _, _) in runs.values().take(IV_SEEDS as usize) {
        wins += usize::from((iv - TRUE_PSI_E).abs() < (ols - TRUE_PSI_E).abs());
        ols_sum += ols;
        iv_sum += iv;
        min_f = min_f.min(*f);
    }
    let k = IV_SEEDS as f64;
    assert!(report(
        8,
        wins >= IV_MIN_WINS,
        format!(
            "IV closer to ψ_E = {TRUE_PSI_E} in {wins}/{IV_SEEDS} (need {IV_MIN_WINS}); mean OLS {:.4}, mean IV {:.4}; smallest first-stage F {min_f:.0}",
            ols_sum / k,
            iv_sum / k
        )
    ));
}

#[test]
fn criterion_09_reliability_calibration() {
    let runs = retest_runs();
    let within = |x: f64, (lo, hi): (f64, f64)| (lo..=hi).contains(&x);
    let picked: Vec<_> = runs.values().take(RELIABILITY_SEEDS as usize).collect();
    let ok = picked.iter().filter(|r| within(r.3, R_ALPHA_RANGE) && within(r.4, R_BETA_RANGE)).count();
    let span = |f: fn(&&(f64, f64, f64, f64, f64)) -> f64| {
        let v: Vec<f64> = picked.iter().map(f).collect();
        (v.iter().copied().fold(f64::INFINITY, f64::min), v.iter().copied().fold(f64::NEG_INFINITY, f64::max))
    };
    let (a_lo, a_hi) = span(|r| r.3);
    let (b_lo, b_hi) = span(|r| r.4);
    assert!(report(
        9,
        ok == picked.len(),
        format!(
            "{ok}/{RELIABILITY_SEEDS} seeds in range; r_alpha {a_lo:.3}–{a_hi:.3} (in {:?}), r_beta {b_lo:.3}–{b_hi:.3} (in {:?})",
            R_ALPHA_RANGE, R_BETA_RANGE
        )
    ));
}

#[test]
fn criterion_10_engine_oracles() {
    let sandwich = common::nine_row_sandwich_gap();
    let (delta, boot) = common::delta_and_bootstrap_se();
    let rel = (delta - boot).abs() / boot;
    let mut three_pl: f64 = 0.0;
    for (a, b, c) in [(1.0, 0.0, 0.2), (1.7, 0.3, 0.2), (0.8, -1.2, 0.0), (2.0, 1.5, 0.35)] {
        three_pl = three_pl.max((three_pl_prob(b, a, b, c).unwrap() - (c + (1.0 - c) / 2.0)).abs());
        three_pl = three_pl.max((three_pl_prob(b - 50.0 / a, a, b, c).unwrap() - c).abs());
    }
    let pass = sandwich <= SANDWICH_TOL && rel <= BOOTSTRAP_REL_TOL && three_pl <= THREE_PL_TOL;
    assert!(report(
        10,
        pass,
        format!(
            "sandwich gap {sandwich:.1e} (≤{SANDWICH_TOL:e}); delta SE {delta:.5} vs bootstrap {boot:.5}, rel {rel:.4} (≤{BOOTSTRAP_REL_TOL}); \
             3PL limits {three_pl:.1e} (≤{THREE_PL_TOL:e})"
        )
    ));
}

fn run_pipeline(dir: &Path, threads: usize) {
    let config = dir.join("run.toml");
    std::fs::write(
        &config,
        format!(
            "seed = 5\n[output]\ndir = \"{}\"\n[cohort]\nn_students = 3000\n\
             [[latent.groups]]\nname = \"female\"\nshare = 0.5\ndelta_alpha = 0.03\ndelta_beta = -0.02\n",
            dir.join("out").display()
        ),
    )
    .unwrap();
    let cli = Cli::try_parse_from(["endurance", "--config", config.to_str().unwrap(), "run"]).unwrap();
    pool(threads).install(|| cli::run(&cli)).unwrap();
}

/// Every output file except the manifest, whose stage records carry wall
/// times.
fn output_tree(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    std::fs::read_dir(dir.join("out"))
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.file_name().unwrap() != "manifest.json")
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap()))
        .collect()
}

#[test]
fn criterion_11_determinism_across_threads() {
    let runs: Vec<BTreeMap<String, Vec<u8>>> = [1, 4, 4]
        .iter()
        .map(|&threads| {
            let dir = tempfile::tempdir().unwrap();
            run_pipeline(dir.path(), threads);
            output_tree(dir.path())
        })
        .collect();
    let csvs = runs[0].keys().filter(|k| k.ends_with(".csv")).count();
    let differing: Vec<&String> = runs[0]
        .iter()
        .filter(|(k, v)| runs[1..].iter().any(|r| r.get(*k) != Some(v)))
        .map(|(k, _)| k)
        .collect();
    let same_names = runs.iter().all(|r| r.keys().eq(runs[0].keys()));
    let pass = differing.is_empty() && same_names && csvs > 10;
    assert!(report(
        11,
        pass,
        format!(
            "{} files ({csvs} CSV) byte-identical across 1, 4 and 4 threads; differing: {differing:?}",
            runs[0].len()
        )
    ));
}
