//! Composite win rates from published metric rows. Rounded values tie
//! often, so the strict and tie-counting rules disagree.

use hetlm::eval::{composite, metric_row, WinRule, METRICS};

const BASELINE: [f64; 20] = [
    0.813, 0.424, 0.417, 0.31, 0.183, 0.035, 0.74, 0.869, 0.917, 0.55, 0.402, 0.551, 0.532, 0.255, 0.533, 0.542,
    0.152, 0.121, 0.119, 0.109,
];
const CANDIDATE: [f64; 20] = [
    0.816, 0.385, 0.407, 0.284, 0.197, 0.044, 0.741, 0.869, 0.918, 0.51, 0.371, 0.508, 0.537, 0.245, 0.537, 0.522,
    0.15, 0.103, 0.107, 0.092,
];

fn main() -> hetlm::Result<()> {
    let (c, b) = (metric_row(&CANDIDATE), metric_row(&BASELINE));
    for rule in [WinRule::Strict, WinRule::TiesCount] {
        let s = composite(&c, &b, rule)?;
        println!(
            "{rule:?}: outcome {:.3} page-gen mean {:.3} page-gen var {:.3} overall {:.3}",
            s.outcome_composite, s.pagegen_mean_composite, s.pagegen_var_composite, s.overall_composite
        );
    }
    let ties: Vec<&str> = METRICS.iter().map(|m| m.0).filter(|m| c[*m] == b[*m]).collect();
    println!("tied metrics: {ties:?}");
    Ok(())
}
