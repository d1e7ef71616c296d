//! Every difficulty method on one cohort, compared with the simulated
//! question difficulties.
//!
//!     cargo run --release --example difficulty_measures

use endurance::decompose::pearson;
use endurance::difficulty::{estimate_difficulty, DifficultyMethod};
use endurance::synth::*;

fn main() {
    let seed = 11;
    let design = build_design(&DesignConfig::default(), seed).unwrap();
    let pop = draw_population(20_000, &LatentConfig::default(), seed).unwrap();
    let truth = draw_item_difficulty(design.n_questions(), 0.05, seed);
    let responses = simulate_responses(&design, &pop, &truth, &ResponseConfig::default(), seed).unwrap();

    for method in DifficultyMethod::ALL {
        let table = match estimate_difficulty(&responses, &design, method) {
            Ok(t) => t,
            Err(e) => {
                println!("{:<16} {e}", method.as_str());
                continue;
            }
        };
        let est = table.dense(design.n_questions());
        let mean_effect = table.rows.iter().map(|r| r.position_effect_used).sum::<f64>() / table.rows.len() as f64;
        let fallbacks = table.rows.iter().filter(|r| r.fallback).count();
        println!(
            "{:<16} corr with truth {:.3}, mean position effect {:+.5}, {fallbacks} fallbacks",
            method.as_str(),
            pearson(&est, &truth).unwrap_or(f64::NAN),
            mean_effect
        );
    }
}
