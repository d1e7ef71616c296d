//! A group score gap split into ability and endurance parts, and what
//! halving the exam would do to it.
//!
//!     cargo run --release --example gap_reform

use std::collections::HashMap;

use endurance::analysis::*;
use endurance::decompose::*;
use endurance::difficulty::{cross_fit_difficulty, DifficultyMethod};
use endurance::synth::*;

fn main() {
    let seed = 17;
    let latent = LatentConfig {
        groups: vec![GroupShift {
            name: "flag".into(),
            share: 0.5,
            delta_alpha: 0.03,
            delta_beta: -0.02,
        }],
        ..Default::default()
    };
    let design = build_design(&DesignConfig::default(), seed).unwrap();
    let pop = draw_population(30_000, &latent, seed).unwrap();
    let difficulty = draw_item_difficulty(design.n_questions(), 0.05, seed);
    let responses = simulate_responses(&design, &pop, &difficulty, &ResponseConfig::default(), seed).unwrap();
    let cf = cross_fit_difficulty(&responses, &design, DifficultyMethod::Pooled).unwrap();
    let input = DifficultyInput::from_cross_fit(&cf, design.n_questions());
    let est = decompose_cohort(&responses, &design, &input, DecomposeOptions::default());

    let flags = pop.group("flag").unwrap();
    let in_group: HashMap<u64, bool> = pop.student_ids.iter().zip(flags).map(|(&id, &f)| (id, f)).collect();
    let g = gap_decomposition(&est, "flag", &in_group, 0.5, GapVariant::Unconditional).unwrap();
    println!("groups: {} flagged, {} not", g.n_group1, g.n_group0);
    println!("score gap  {:+.4} (se {:.4})", g.score_gap, g.se_score_gap);
    println!("  ability   {:+.4} (se {:.4}; simulated +0.030)", g.ability_component, g.se_ability);
    println!("  endurance {:+.4} (se {:.4}; simulated −0.010)", g.endurance_component, g.se_endurance);
    for factor in [0.5, 0.75] {
        let (pp, pct) = reform_counterfactual(&g, factor).unwrap();
        let pct = pct.map_or("n/a".to_string(), |p| format!("{:+.1}%", 100.0 * p));
        println!("exam at {:.0}% length: gap changes by {pp:+.4} ({pct})", 100.0 * factor);
    }
}
