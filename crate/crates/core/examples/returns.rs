//! Returns to ability and endurance in log wages: OLS on the estimates,
//! then 2SLS using the previous sitting as instruments.
//!
//!     cargo run --release --example returns

use endurance::analysis::*;
use endurance::decompose::*;
use endurance::difficulty::{cross_fit_difficulty, DifficultyMethod};
use endurance::synth::*;

fn main() {
    let seed = 13;
    let design = build_design(&DesignConfig::default(), seed).unwrap();
    let pop = draw_population(20_000, &LatentConfig::default(), seed).unwrap();
    let difficulty = draw_item_difficulty(design.n_questions(), 0.05, seed);
    let (prev, cur) =
        simulate_retest(&pop, &design, &difficulty, &ResponseConfig::default(), &RetestConfig::default(), seed).unwrap();
    let outcomes = OutcomeConfig::default();
    let panel = simulate_outcomes(&pop, &outcomes, seed).unwrap();

    let cf = cross_fit_difficulty(&cur, &design, DifficultyMethod::Pooled).unwrap();
    let input = DifficultyInput::from_cross_fit(&cf, design.n_questions());
    let e1 = decompose_cohort(&cur, &design, &input, DecomposeOptions::default());
    let e0 = decompose_cohort(&prev, &design, &input, DecomposeOptions::default());

    let sample = SkillSample::from_estimates(&e1, &panel, Outcome::LogWage, true);
    let scale = SkillScale::persistent(&e1, &e0).unwrap();
    let score = returns_ols(&sample, ReturnsSpec::ScoreOnly, SkillScale::Sample).unwrap();
    let ols = returns_ols(&sample, ReturnsSpec::Skills, scale).unwrap();
    let iv = returns_iv(&sample, &e0, scale).unwrap();
    let truth = SkillSample::from_truth(&pop, &panel, Outcome::LogWage, true);
    let oracle = returns_ols(&truth, ReturnsSpec::Skills, SkillScale::Sample).unwrap();

    println!("per SD of skill, log wage (simulated ψ_A {}, ψ_E {}):", outcomes.psi_a, outcomes.psi_e);
    println!("  score only        {:.4}", score.psi(SCORE));
    for (label, r) in [("true skills", &oracle), ("ols", &ols), ("iv", &iv)] {
        let ratio = r.ratio.as_ref().map_or(String::new(), |q| format!(", ratio {:.2} (se {:.2})", q.value, q.se));
        println!("  {label:<12} ability {:.4}, endurance {:.4}{ratio}", r.psi(ABILITY), r.psi(ENDURANCE));
    }
    println!("first-stage F: {:?}", iv.first_stage_f.iter().map(|f| f.round()).collect::<Vec<_>>());

    let dec = returns_decile(&sample, ReturnsSpec::Skills).unwrap();
    println!("{} decile effects estimated", dec.effects.len());
}
