//! Draws a booklet design, a population with one flagged group, responses
//! and long-run outcomes, then prints a few checks on what came out.
//!
//!     cargo run --release --example simulate_cohort

use endurance::synth::*;

fn main() {
    let seed = 42;
    let design = build_design(&DesignConfig::default(), seed).unwrap();
    println!(
        "{} questions over {} days, {} booklets",
        design.n_questions(),
        design.days,
        design.booklets
    );

    let latent = LatentConfig {
        groups: vec![GroupShift {
            name: "flag".into(),
            share: 0.3,
            delta_alpha: 0.02,
            delta_beta: -0.01,
        }],
        ..Default::default()
    };
    let pop = draw_population(10_000, &latent, seed).unwrap();
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    println!("mean alpha {:.4}, mean beta {:.4}", mean(&pop.alpha), mean(&pop.beta));

    let difficulty = draw_item_difficulty(design.n_questions(), 0.05, seed);
    let responses = simulate_responses(&design, &pop, &difficulty, &ResponseConfig::default(), seed).unwrap();
    let (mut first, mut last, mut n_first, mut n_last) = (0.0, 0.0, 0.0, 0.0);
    for i in 0..responses.n_students() {
        for c in responses.student(i) {
            let p = responses.pos_norm(c);
            if p < 0.1 {
                first += c.correct() as u8 as f64;
                n_first += 1.0;
            } else if p > 0.9 {
                last += c.correct() as u8 as f64;
                n_last += 1.0;
            }
        }
    }
    println!("fraction correct: first tenth of the day {:.3}, last tenth {:.3}", first / n_first, last / n_last);

    let outcomes = simulate_outcomes(&pop, &OutcomeConfig::default(), seed).unwrap();
    println!("mean log wage {:.3}, {} controls", mean(&outcomes.log_wage), outcomes.control_labels.len());
}
