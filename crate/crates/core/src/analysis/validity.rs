//! Predictive validity of individual questions: the correlation between
//! answering a question correctly and a long-run outcome, and how it
//! changes with the question's position.

use std::collections::BTreeMap;

use rayon::prelude::*;

use super::{AnalysisError, Result};
use crate::regress::{self, DesignMatrix};
use crate::synth::{QuestionId, ResponseMatrix};

pub const DEFAULT_MIN_CELL: usize = 50;

#[derive(Debug, Clone, PartialEq)]
pub struct ValidityRow {
    pub question: QuestionId,
    pub booklet: u8,
    pub position: u16,
    pub n: usize,
    pub rho: f64,
    /// `1 / sqrt(n − 3)`.
    pub se_rho: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ValidityTable {
    pub outcome_label: String,
    pub rows: Vec<ValidityRow>,
    /// Cells dropped for size or for a constant answer or outcome.
    pub skipped: usize,
}

/// The outcome each student's answers are correlated with.
#[derive(Debug, Clone, Copy)]
pub enum ValidityTarget<'a> {
    /// One value per response-matrix row; `NaN` marks a missing outcome.
    External(&'a [f64]),
    /// The student's fraction correct on all other questions.
    LeaveOneOutScore,
}

/// `ρ = (E[Y | C=1] − E[Y | C=0]) · σ_C / σ_Y` with `σ_C = sqrt(π(1 − π))`,
/// which is the Pearson correlation of a binary `C` with `Y`. `None` when
/// either variable is constant.
pub fn binary_validity(c: &[bool], y: &[f64]) -> Option<f64> {
    let n = c.len() as f64;
    let ones = c.iter().filter(|&&v| v).count() as f64;
    if ones == 0.0 || ones == n {
        return None;
    }
    let mean_y = y.iter().sum::<f64>() / n;
    let var_y = y.iter().map(|v| (v - mean_y).powi(2)).sum::<f64>() / n;
    if !(var_y > 0.0) {
        return None;
    }
    let m1 = c.iter().zip(y).filter(|(c, _)| **c).map(|(_, y)| y).sum::<f64>() / ones;
    let m0 = c.iter().zip(y).filter(|(c, _)| !**c).map(|(_, y)| y).sum::<f64>() / (n - ones);
    let pi = ones / n;
    Some(((m1 - m0) * (pi * (1.0 - pi)).sqrt() / var_y.sqrt()).clamp(-1.0, 1.0))
}

fn row_totals(responses: &ResponseMatrix) -> Vec<(f64, f64)> {
    (0..responses.n_students())
        .map(|i| {
            let cells = responses.student(i);
            let n = cells.iter().filter(|c| c.present()).count() as f64;
            let k = cells.iter().filter(|c| c.correct()).count() as f64;
            (k, n)
        })
        .collect()
}

/// Validity of every question in every booklet.
pub fn question_validity(
    responses: &ResponseMatrix,
    target: ValidityTarget<'_>,
    outcome_label: &str,
    min_cell: usize,
) -> Result<ValidityTable> {
    if let ValidityTarget::External(y) = target {
        if y.len() != responses.n_students() {
            return Err(regress::RegressError::DimensionMismatch(format!(
                "{} outcomes for {} students",
                y.len(),
                responses.n_students()
            ))
            .into());
        }
    }
    let totals = match target {
        ValidityTarget::LeaveOneOutScore => Some(row_totals(responses)),
        ValidityTarget::External(_) => None,
    };
    let per_question: Vec<(Vec<ValidityRow>, usize)> = (0..responses.n_questions())
        .into_par_iter()
        .map(|q| {
            // booklet -> (position, answers, outcomes)
            let mut cells: BTreeMap<u8, (u16, Vec<bool>, Vec<f64>)> = BTreeMap::new();
            for i in 0..responses.n_students() {
                let c = responses.cell(i, q);
                if !c.present() {
                    continue;
                }
                let y = match (target, &totals) {
                    (ValidityTarget::External(y), _) => y[i],
                    (ValidityTarget::LeaveOneOutScore, Some(t)) => {
                        let (k, n) = t[i];
                        if n <= 1.0 {
                            continue;
                        }
                        (k - c.correct() as u8 as f64) / (n - 1.0)
                    }
                    _ => unreachable!(),
                };
                if !y.is_finite() {
                    continue;
                }
                let e = cells.entry(c.booklet).or_insert((c.position, Vec::new(), Vec::new()));
                e.1.push(c.correct());
                e.2.push(y);
            }
            let mut rows = Vec::new();
            let mut skipped = 0;
            for (b, (pos, cs, ys)) in cells {
                let n = cs.len();
                match binary_validity(&cs, &ys) {
                    Some(rho) if n >= min_cell.max(4) => rows.push(ValidityRow {
                        question: q,
                        booklet: b,
                        position: pos,
                        n,
                        rho,
                        se_rho: 1.0 / ((n - 3) as f64).sqrt(),
                    }),
                    _ => skipped += 1,
                }
            }
            (rows, skipped)
        })
        .collect();
    let skipped = per_question.iter().map(|(_, s)| s).sum();
    let rows: Vec<ValidityRow> = per_question.into_iter().flat_map(|(r, _)| r).collect();
    if rows.is_empty() {
        return Err(AnalysisError::Empty);
    }
    Ok(ValidityTable {
        outcome_label: outcome_label.to_string(),
        rows,
        skipped,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ValidityReform {
    pub outcome_label: String,
    /// Change in validity per position, net of question effects.
    pub coef_per_position: f64,
    pub se_coef: f64,
    /// Mean position across cells (precision weighted).
    pub mean_position: f64,
    /// Predicted validity gain from halving the average position; positive
    /// means questions predict better in a shorter exam.
    pub gamma_reform: f64,
    pub se_gamma: f64,
    /// Precision-weighted mean validity.
    pub mean_validity: f64,
    /// `gamma_reform / mean_validity`.
    pub pct_change: f64,
    pub n_cells: usize,
}

/// Question fixed-effects regression of validity on position, weighted by
/// `1 / se_rho²`, with SEs clustered by position.
pub fn validity_reform_regression(table: &ValidityTable) -> Result<ValidityReform> {
    let rows = &table.rows;
    if rows.is_empty() {
        return Err(AnalysisError::Empty);
    }
    let w: Vec<f64> = rows.iter().map(|r| 1.0 / (r.se_rho * r.se_rho)).collect();
    let pos: Vec<f64> = rows.iter().map(|r| r.position as f64).collect();
    let rho: Vec<f64> = rows.iter().map(|r| r.rho).collect();
    let q: Vec<QuestionId> = rows.iter().map(|r| r.question).collect();
    let x = DesignMatrix::from_columns(vec![("position", pos.clone())])?;
    let (xd, yd) = regress::absorb_fixed_effects_weighted(&x, &rho, &q, Some(&w))?;
    if xd.values().iter().all(|v| v.abs() < 1e-9) {
        return Err(AnalysisError::NoWithinVariation);
    }
    let clusters: Vec<u16> = rows.iter().map(|r| r.position).collect();
    let fit = regress::ols_fit(&xd, &yd, Some(&w))?.with_absorbed_df(regress::count_groups(&q));
    let fit = match fit.clone().with_cluster_se(&xd, &clusters) {
        Ok(f) => f,
        Err(regress::RegressError::SingleCluster) => fit,
        Err(e) => return Err(e.into()),
    };
    let coef = fit.coef("position")?;
    let se = fit.se("position")?;
    let wsum: f64 = w.iter().sum();
    let mean_position = pos.iter().zip(&w).map(|(p, w)| p * w).sum::<f64>() / wsum;
    let mean_validity = rho.iter().zip(&w).map(|(r, w)| r * w).sum::<f64>() / wsum;
    let gamma = -coef * mean_position / 2.0;
    Ok(ValidityReform {
        outcome_label: table.outcome_label.clone(),
        coef_per_position: coef,
        se_coef: se,
        mean_position,
        gamma_reform: gamma,
        se_gamma: se * mean_position / 2.0,
        mean_validity,
        pct_change: gamma / mean_validity,
        n_cells: rows.len(),
    })
}

/// Checks, within every group of students that saw the same booklets,
/// that the correlation of the outcome with the total score equals the
/// average question validity weighted by `σ_Cj / σ_T`. Returns the largest
/// discrepancy. Only students with every question present and a finite
/// outcome take part.
pub fn validity_aggregation_check(responses: &ResponseMatrix, y: &[f64]) -> Result<f64> {
    let mut groups: BTreeMap<Vec<u8>, Vec<usize>> = BTreeMap::new();
    for i in 0..responses.n_students() {
        let cells = responses.student(i);
        if !y[i].is_finite() || cells.iter().any(|c| !c.present()) {
            continue;
        }
        let key: Vec<u8> = (0..responses.days).map(|d| responses.booklet_of(i, d).unwrap_or(0)).collect();
        groups.entry(key).or_default().push(i);
    }
    let checked: Vec<Option<f64>> = groups
        .into_par_iter()
        .map(|(_, members)| aggregation_gap(responses, &members, y))
        .collect();
    let gaps: Vec<f64> = checked.into_iter().flatten().collect();
    if gaps.is_empty() {
        return Err(AnalysisError::Empty);
    }
    Ok(gaps.into_iter().fold(0.0, f64::max))
}

fn population_sd(x: &[f64]) -> f64 {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    (x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n).sqrt()
}

fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    crate::decompose::pearson(x, y)
}

/// `|Corr(Y, T) − (1/J) Σ_j (σ_Cj/σ_T) ρ_j|` for one group; `None` if the
/// total score or the outcome is constant.
fn aggregation_gap(responses: &ResponseMatrix, members: &[usize], y: &[f64]) -> Option<f64> {
    let nq = responses.n_questions();
    let ys: Vec<f64> = members.iter().map(|&i| y[i]).collect();
    let t: Vec<f64> = members.iter().map(|&i| responses.fraction_correct(i)).collect();
    let sd_t = population_sd(&t);
    let lhs = pearson(&ys, &t)?;
    let mut rhs = 0.0;
    for q in 0..nq {
        let c: Vec<bool> = members.iter().map(|&i| responses.cell(i, q).correct()).collect();
        // A constant answer contributes σ_C ρ = 0.
        if let Some(rho) = binary_validity(&c, &ys) {
            let cf: Vec<f64> = c.iter().map(|&v| v as u8 as f64).collect();
            rhs += population_sd(&cf) / sd_t * rho;
        }
    }
    rhs /= nq as f64;
    Some((lhs - rhs).abs())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_answer_and_outcome_is_perfectly_valid() {
        let c = [true, false, true, true, false];
        let y: Vec<f64> = c.iter().map(|&v| v as u8 as f64).collect();
        assert!((binary_validity(&c, &y).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn six_student_hand_fixture() {
        // C = 1,1,1,0,0,0 ; Y = 1,1,0,1,0,0
        // cov = 1/6·Σ(c−½)(y−½) = 1/6·(¼+¼−¼−¼+¼+¼) = 1/12, σ_C = σ_Y = ½
        let c = [true, true, true, false, false, false];
        let y = [1.0, 1.0, 0.0, 1.0, 0.0, 0.0];
        assert!((binary_validity(&c, &y).unwrap() - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn constant_cells_are_degenerate() {
        assert_eq!(binary_validity(&[true, true], &[0.0, 1.0]), None);
        assert_eq!(binary_validity(&[true, false], &[2.0, 2.0]), None);
    }
}
