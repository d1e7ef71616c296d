//! Two sittings of the same cohort: test-retest correlations of the
//! ability and endurance estimates.
//!
//!     cargo run --release --example retest_reliability

use endurance::decompose::*;
use endurance::difficulty::{cross_fit_difficulty, DifficultyMethod};
use endurance::synth::*;

fn main() {
    let seed = 9;
    let design = build_design(&DesignConfig::default(), seed).unwrap();
    let pop = draw_population(20_000, &LatentConfig::default(), seed).unwrap();
    let difficulty = draw_item_difficulty(design.n_questions(), 0.05, seed);
    let retest = RetestConfig::default();
    let (prev, cur) = simulate_retest(&pop, &design, &difficulty, &ResponseConfig::default(), &retest, seed).unwrap();

    let cf = cross_fit_difficulty(&cur, &design, DifficultyMethod::Pooled).unwrap();
    let input = DifficultyInput::from_cross_fit(&cf, design.n_questions());
    let e1 = decompose_cohort(&cur, &design, &input, DecomposeOptions::default());
    let e0 = decompose_cohort(&prev, &design, &input, DecomposeOptions::default());
    let rel = retest_reliability(&e0, &e1).unwrap();
    println!("{} students in both sittings", rel.n_matched);
    println!("r_alpha {:.3}, r_beta {:.3}", rel.r_alpha, rel.r_beta);
    for b in rel.bins.iter().filter(|b| b.skill == "beta").step_by(20) {
        println!("  beta bin {:>2}: first sitting {:+.3}, second {:+.3}", b.bin, b.mean_t0, b.mean_t1);
    }
}
