//! Per-student ability and endurance: the fits, the score identity, the
//! noise-corrected spread and shrinkage toward the mean.
//!
//!     cargo run --release --example decompose_students

use endurance::decompose::*;
use endurance::difficulty::{cross_fit_difficulty, DifficultyMethod};
use endurance::synth::*;

fn main() {
    let seed = 5;
    let design = build_design(&DesignConfig::default(), seed).unwrap();
    let pop = draw_population(10_000, &LatentConfig::default(), seed).unwrap();
    let difficulty = draw_item_difficulty(design.n_questions(), 0.05, seed);
    let responses = simulate_responses(&design, &pop, &difficulty, &ResponseConfig::default(), seed).unwrap();

    let cf = cross_fit_difficulty(&responses, &design, DifficultyMethod::Pooled).unwrap();
    let input = DifficultyInput::from_cross_fit(&cf, design.n_questions());
    let est = decompose_cohort(&responses, &design, &input, DecomposeOptions::default());
    println!("{} students fitted, {} excluded", est.rows.len(), est.excluded.len());

    let r = &est.rows[0];
    println!(
        "student {}: alpha {:.3} (se {:.3}), beta {:.3} (se {:.3}); score {:.4} = implied {:.4}",
        r.student_id,
        r.alpha_hat,
        r.se_alpha,
        r.beta_hat,
        r.se_beta,
        r.fraction_correct,
        implied_score(r)
    );

    let m = latent_moments(&est);
    let sd = |v: &[f64]| {
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
    };
    println!("SD of beta: raw {:.4}, noise-corrected {:.4}, true {:.4}", m.sd_beta_hat_raw, m.sd_beta_latent, sd(&pop.beta));
    println!("SD of alpha: raw {:.4}, noise-corrected {:.4}, true {:.4}", m.sd_alpha_hat_raw, m.sd_alpha_latent, sd(&pop.alpha));

    let shrunk = shrink_skill_estimates(&est, &m).unwrap();
    let truth: Vec<f64> = est.rows.iter().map(|r| pop.beta[r.student_id as usize]).collect();
    let mse = |v: &[f64]| v.iter().zip(&truth).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / v.len() as f64;
    println!("beta MSE: raw {:.5}, shrunk {:.5}", mse(&est.beta()), mse(&shrunk.beta_s));

    for spec in Spec::ALL {
        let e = decompose_cohort(&responses, &design, &input, DecomposeOptions { spec, ..Default::default() });
        let mean_beta = e.beta().iter().sum::<f64>() / e.rows.len() as f64;
        println!("  {:<16} mean beta {mean_beta:+.4}", spec.as_str());
    }
}
