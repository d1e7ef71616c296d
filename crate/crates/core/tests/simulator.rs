//! Behaviour of the cohort simulator checked against what its inputs imply.

use endurance::decompose::*;
use endurance::regress::{ols_fit, DesignMatrix};
use endurance::synth::*;

fn pool(threads: usize) -> rayon::ThreadPool {
    rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap()
}

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

fn sd(x: &[f64]) -> f64 {
    let m = mean(x);
    (x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (x.len() - 1) as f64).sqrt()
}

#[test]
fn designs_are_seeded_and_spread_positions() {
    let cfg = DesignConfig::default();
    assert_eq!(build_design(&cfg, 5).unwrap(), build_design(&cfg, 5).unwrap());
    assert_ne!(build_design(&cfg, 5).unwrap(), build_design(&cfg, 6).unwrap());

    // Expected range of 4 uniform draws from 45 slots is about 27; subject
    // blocks keep every question inside its own half of the day.
    let mut total = 0.0;
    for seed in 0..100 {
        let d = build_design(&cfg, seed).unwrap();
        let q = d.n_questions();
        total += (0..q).map(|j| d.position_range(j) as f64).sum::<f64>() / q as f64;
    }
    assert!(total / 100.0 >= 20.0, "mean position range {}", total / 100.0);
}

#[test]
fn population_moments_match_the_configuration() {
    let pop = draw_population(100_000, &LatentConfig::default(), 11).unwrap();
    assert!((sd(&pop.beta) - 0.088).abs() < 0.002, "sd beta {}", sd(&pop.beta));
    assert!((sd(&pop.alpha) - 0.132).abs() < 0.002);
    assert!((mean(&pop.beta) + 0.058).abs() < 0.002);
    assert!(pop.alpha.iter().all(|a| (0.05..=0.95).contains(a)));
}

#[test]
fn group_shift_separates_group_means() {
    let cfg = LatentConfig {
        groups: vec![GroupShift {
            name: "low_income".into(),
            share: 0.4,
            delta_alpha: 0.0,
            delta_beta: -0.02,
        }],
        ..Default::default()
    };
    // Share the same underlying draws with and without the shift so the
    // sampling noise in the group means cancels.
    let shifted = draw_population(100_000, &cfg, 3).unwrap();
    let flags = shifted.group("low_income").unwrap();
    let group_mean = |v: &[f64], on: bool| {
        let x: Vec<f64> = v.iter().zip(flags).filter(|(_, f)| **f == on).map(|(b, _)| *b).collect();
        mean(&x)
    };
    let diff = group_mean(&shifted.beta, true) - group_mean(&shifted.beta, false);
    let base_cfg = LatentConfig {
        groups: vec![GroupShift {
            delta_beta: 0.0,
            ..cfg.groups[0].clone()
        }],
        ..cfg.clone()
    };
    let base = draw_population(100_000, &base_cfg, 3).unwrap();
    let base_diff = group_mean(&base.beta, true) - group_mean(&base.beta, false);
    assert!((diff - base_diff + 0.02).abs() < 0.001, "shifted {diff} base {base_diff}");
    // Unconditionally the between-group gap is still within sampling noise.
    assert!((diff + 0.02).abs() < 0.003);
}

#[test]
fn responses_do_not_depend_on_thread_count() {
    let design = build_design(&DesignConfig::default(), 2).unwrap();
    let pop = draw_population(3_000, &LatentConfig::default(), 2).unwrap();
    let diff = draw_item_difficulty(design.n_questions(), 0.1, 2);
    let cfg = ResponseConfig {
        nonresponse: Some(NonresponseConfig {
            intercept: -4.0,
            slope: 2.0,
        }),
        ..Default::default()
    };
    let run = |threads| {
        pool(threads).install(|| {
            let p = draw_population(3_000, &LatentConfig::default(), 2).unwrap();
            simulate_responses(&design, &p, &diff, &cfg, 9).unwrap()
        })
    };
    let one = run(1);
    assert_eq!(one, run(4));
    assert_eq!(one, simulate_responses(&design, &pop, &diff, &cfg, 9).unwrap());
    assert_ne!(one, simulate_responses(&design, &pop, &diff, &cfg, 10).unwrap());
    for i in 0..one.n_students() {
        assert!(one.student(i).iter().all(|c| c.answered() || !c.correct()));
    }
}

#[test]
fn without_nonresponse_every_cell_is_answered() {
    let design = build_design(&DesignConfig::default(), 1).unwrap();
    let pop = draw_population(500, &LatentConfig::default(), 1).unwrap();
    let diff = draw_item_difficulty(design.n_questions(), 0.1, 1);
    let r = simulate_responses(&design, &pop, &diff, &ResponseConfig::default(), 1).unwrap();
    assert!((0..r.n_students()).all(|i| r.student(i).iter().all(|c| c.answered())));
}

/// Fraction correct among cells with the given normalized position.
fn rate_at(r: &ResponseMatrix, pn: f64) -> (f64, usize) {
    let mut k = 0usize;
    let mut n = 0usize;
    for i in 0..r.n_students() {
        for c in r.student(i) {
            if (r.pos_norm(c) - pn).abs() < 1e-12 {
                n += 1;
                k += c.correct() as usize;
            }
        }
    }
    (k as f64 / n as f64, n)
}

#[test]
fn daily_decline_of_seven_points() {
    let n = 40_000;
    let design = build_design(&DesignConfig::default(), 4).unwrap();
    let pop = LatentPopulation::from_skills(vec![0.45; n], vec![-0.071; n]);
    let r = simulate_responses(&design, &pop, &vec![0.0; design.n_questions()], &ResponseConfig::default(), 4).unwrap();
    assert_eq!(r.clamp_events, 0);
    let (first, n0) = rate_at(&r, 0.0);
    let (last, n1) = rate_at(&r, 1.0);
    let tol = |p: f64, m: usize| 4.0 * (p * (1.0 - p) / m as f64).sqrt();
    assert!((first - 0.45).abs() < tol(0.45, n0), "first {first}");
    assert!((last - 0.379).abs() < tol(0.379, n1), "last {last}");
    // Averaged over the day the expected score is alpha + beta / 2.
    let cells = (n * design.n_questions()) as f64;
    let overall = (0..n).map(|i| r.fraction_correct(i)).sum::<f64>() / n as f64;
    assert!((overall - (0.45 - 0.0355)).abs() < 4.0 * (0.25 / cells).sqrt());
}

#[test]
fn no_endurance_means_no_position_slope() {
    let n = 5_000;
    let design = build_design(&DesignConfig::default(), 8).unwrap();
    let pop = LatentPopulation::from_skills(vec![0.4; n], vec![0.0; n]);
    let cfg = ResponseConfig {
        model: ResponseModel::Linear { difficulty_loading: 0.0 },
        ..Default::default()
    };
    let r = simulate_responses(&design, &pop, &vec![0.0; design.n_questions()], &cfg, 8).unwrap();
    let mut x = Vec::new();
    let mut y = Vec::new();
    for i in 0..n {
        for c in r.student(i) {
            x.push(r.pos_norm(c));
            y.push(c.correct() as u8 as f64);
        }
    }
    let dm = DesignMatrix::from_columns(vec![("pos", x)]).unwrap().with_intercept().unwrap();
    let fit = ols_fit(&dm, &y, None).unwrap();
    let (b, se) = (fit.coef("pos").unwrap(), fit.se("pos").unwrap());
    assert!(b.abs() < 2.5 * se, "slope {b} se {se}");
}

#[test]
fn mean_score_matches_the_latent_means() {
    // Narrow skills keep every probability inside (0, 1).
    let cfg = LatentConfig {
        mean_alpha: 0.5,
        sd_alpha: 0.05,
        sd_beta: 0.03,
        ..Default::default()
    };
    let n = 20_000;
    let design = build_design(&DesignConfig::default(), 6).unwrap();
    let pop = draw_population(n, &cfg, 6).unwrap();
    let diff = draw_item_difficulty(design.n_questions(), 0.05, 6);
    let r = simulate_responses(&design, &pop, &diff, &ResponseConfig::default(), 6).unwrap();
    assert_eq!(r.clamp_events, 0);
    let scores: Vec<f64> = (0..n).map(|i| r.fraction_correct(i)).collect();
    let expected = mean(&pop.alpha) + mean(&pop.beta) * 0.5;
    let mc_se = sd(&scores) / (n as f64).sqrt();
    assert!((mean(&scores) - expected).abs() < 2.0 * mc_se.max(1e-4), "{} vs {expected}", mean(&scores));
}

#[test]
fn three_pl_scalar_oracle() {
    // 1 / (1 + e^-1) to 17 significant digits.
    let sigma1 = 0.731_058_578_630_004_9;
    assert!((three_pl_prob(1.0, 1.0, 0.0, 0.2).unwrap() - (0.2 + 0.8 * sigma1)).abs() < 1e-15);
    for (a, b, c) in [(0.8, -1.0, 0.0), (2.0, 1.5, 0.2), (1.3, 0.0, 0.35)] {
        assert!((three_pl_prob(b, a, b, c).unwrap() - (c + (1.0 - c) / 2.0)).abs() < 1e-9);
        assert!((three_pl_prob(b - 50.0 / a, a, b, c).unwrap() - c).abs() < 1e-9);
    }
}

fn wage_oracle(pop: &LatentPopulation, panel: &OutcomePanel) -> endurance::regress::FitResult {
    let z = |v: &[f64]| {
        let (m, s) = (mean(v), sd(v) * (((v.len() - 1) as f64) / v.len() as f64).sqrt());
        v.iter().map(|x| (x - m) / s).collect::<Vec<f64>>()
    };
    let mut cols = vec![("za".to_string(), z(&pop.alpha)), ("zb".to_string(), z(&pop.beta))];
    for (k, c) in pop.covariates.iter().enumerate() {
        cols.push((format!("x{k}"), c.clone()));
    }
    let x = DesignMatrix::from_columns(cols).unwrap().with_intercept().unwrap();
    ols_fit(&x, &panel.log_wage, None).unwrap()
}

#[test]
fn wage_returns_are_recovered_from_true_skills() {
    let pop = draw_population(100_000, &LatentConfig::default(), 21).unwrap();
    let panel = simulate_outcomes(&pop, &OutcomeConfig::default(), 21).unwrap();
    let fit = wage_oracle(&pop, &panel);
    assert!((fit.coef("za").unwrap() - 0.154).abs() < 0.01);
    assert!((fit.coef("zb").unwrap() - 0.054).abs() < 0.01);
    assert!(panel.log_wage.iter().all(|w| w.is_finite()));
    assert!(panel.occupation_id.iter().all(|&o| o < 20));
    assert!(panel.employer_id.iter().all(|&e| e < 200));

    let exact = OutcomeConfig {
        sigma_wage: 0.0,
        ..Default::default()
    };
    let pop = draw_population(2_000, &LatentConfig::default(), 22).unwrap();
    let fit = wage_oracle(&pop, &simulate_outcomes(&pop, &exact, 22).unwrap());
    assert!((fit.r_squared - 1.0).abs() < 1e-10);
}

#[test]
fn null_returns_leave_wages_unrelated_to_skills() {
    let cfg = OutcomeConfig {
        psi_a: 0.0,
        psi_e: 0.0,
        lambda: vec![],
        ..Default::default()
    };
    let pop = draw_population(50_000, &LatentConfig::default(), 31).unwrap();
    let fit = wage_oracle(&pop, &simulate_outcomes(&pop, &cfg, 31).unwrap());
    for term in ["za", "zb"] {
        let (b, se) = (fit.coef(term).unwrap(), fit.se(term).unwrap());
        assert!(b.abs() < 2.5 * se, "{term}: {b} ({se})");
    }
}

fn retest(
    n: usize,
    questions_per_day: usize,
    transient: RetestConfig,
    seed: u64,
) -> (Reliability, SkillEstimates) {
    let design = build_design(
        &DesignConfig {
            questions_per_day,
            ..Default::default()
        },
        seed,
    )
    .unwrap();
    let pop = draw_population(n, &LatentConfig::default(), seed).unwrap();
    let diff = vec![0.0; design.n_questions()];
    let (prev, cur) =
        simulate_retest(&pop, &design, &diff, &ResponseConfig::default(), &transient, seed).unwrap();
    let opts = DecomposeOptions::default();
    let e0 = decompose_cohort(&prev, &design, &DifficultyInput::None, opts);
    let e1 = decompose_cohort(&cur, &design, &DifficultyInput::None, opts);
    (retest_reliability(&e0, &e1).unwrap(), e1)
}

#[test]
fn noiseless_retest_with_long_exams_is_reliable() {
    let zero = RetestConfig {
        sd_alpha_transient: 0.0,
        sd_beta_transient: 0.0,
    };
    let (r, _) = retest(2_000, 900, zero, 41);
    assert!(r.r_alpha >= 0.95, "r_alpha {}", r.r_alpha);
    // Endurance is a slope estimated from binary answers; at 900 questions
    // a day its sampling variance is still about a third of the signal.
    assert!(r.r_beta >= 0.75, "r_beta {}", r.r_beta);
}

#[test]
fn retest_reliability_follows_the_attenuation_formula() {
    let transient = RetestConfig {
        sd_alpha_transient: 0.05,
        sd_beta_transient: 0.088,
    };
    let (r, est) = retest(20_000, 90, transient, 43);
    let m = latent_moments(&est);
    let signal = 0.088f64.powi(2);
    let predicted = signal / (signal + transient.sd_beta_transient.powi(2) + m.mean_se2_beta);
    assert!((r.r_beta - predicted).abs() < 0.05, "r_beta {} predicted {predicted}", r.r_beta);

    let huge = RetestConfig {
        sd_alpha_transient: 1.32,
        sd_beta_transient: 0.88,
    };
    let (r, _) = retest(5_000, 90, huge, 44);
    assert!(r.r_alpha < 0.05 && r.r_beta < 0.05, "r_alpha {} r_beta {}", r.r_alpha, r.r_beta);
}
