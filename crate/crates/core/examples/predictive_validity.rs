//! How well each question predicts a later outcome, and whether it
//! predicts better when asked early in the day.
//!
//!     cargo run --release --example predictive_validity

use endurance::analysis::*;
use endurance::synth::*;

fn main() {
    let seed = 19;
    let n = 30_000;
    let design = build_design(&DesignConfig::default(), seed).unwrap();
    let pop = draw_population(n, &LatentConfig::default(), seed).unwrap();
    // endurance plays no direct role in the outcome here
    let panel = simulate_outcomes(&pop, &OutcomeConfig { psi_e: 0.0, ..Default::default() }, seed).unwrap();
    let cfg = ResponseConfig {
        model: ResponseModel::ThreePl {
            items: draw_item_params(design.n_questions(), 1.5, 0.5, 0.2, seed),
            scale: 10.0,
            center: 0.373,
        },
        ..Default::default()
    };
    let difficulty = draw_item_difficulty(design.n_questions(), 0.05, seed);
    let responses = simulate_responses(&design, &pop, &difficulty, &cfg, seed).unwrap();

    let y = &panel.log_wage;
    println!("aggregation identity gap {:.1e}", validity_aggregation_check(&responses, y).unwrap());
    let table = question_validity(&responses, ValidityTarget::External(y), "log_wage", DEFAULT_MIN_CELL).unwrap();
    let reform = validity_reform_regression(&table).unwrap();
    println!("{} question-booklet cells, mean validity {:.4}", reform.n_cells, reform.mean_validity);
    println!("validity per position {:+.6} (se {:.6})", reform.coef_per_position, reform.se_coef);
    println!(
        "halving the average position: {:+.5} (se {:.5}), {:+.1}% of mean validity",
        reform.gamma_reform,
        reform.se_gamma,
        100.0 * reform.pct_change
    );
}
