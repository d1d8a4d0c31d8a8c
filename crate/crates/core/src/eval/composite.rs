use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MetricGroup {
    PageGenMean,
    Outcome,
    PageGenVar,
}

/// The 20 compared metrics: name, group, and whether higher is better.
pub const METRICS: [(&str, MetricGroup, bool); 20] = [
    ("HR", MetricGroup::PageGenMean, true),
    ("IoA", MetricGroup::PageGenMean, true),
    ("IoP", MetricGroup::PageGenMean, true),
    ("IoU", MetricGroup::PageGenMean, true),
    ("New-P", MetricGroup::PageGenMean, true),
    ("Val-P", MetricGroup::PageGenMean, true),
    ("AccCart", MetricGroup::Outcome, true),
    ("AccPur", MetricGroup::Outcome, true),
    ("AccC/P", MetricGroup::Outcome, true),
    ("RecCart", MetricGroup::Outcome, true),
    ("RecPur", MetricGroup::Outcome, true),
    ("RecC/P", MetricGroup::Outcome, true),
    ("PrecCart", MetricGroup::Outcome, true),
    ("PrecPur", MetricGroup::Outcome, true),
    ("PrecC/P", MetricGroup::Outcome, true),
    ("F1", MetricGroup::Outcome, true),
    ("Var-HR", MetricGroup::PageGenVar, false),
    ("Var-IoA", MetricGroup::PageGenVar, false),
    ("Var-IoP", MetricGroup::PageGenVar, false),
    ("Var-IoU", MetricGroup::PageGenVar, false),
];

/// What counts as a win for the candidate.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum WinRule {
    /// Strictly better in the preferred direction.
    #[default]
    Strict,
    /// Better or equal; useful when values are rounded to a few digits.
    TiesCount,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompositeScores {
    pub outcome_composite: f64,
    pub pagegen_mean_composite: f64,
    pub pagegen_var_composite: f64,
    pub overall_composite: f64,
    pub wins: usize,
    /// Per-metric verdicts, in metric order.
    pub won: Vec<(String, bool)>,
}

/// Scores `candidate` against `baseline` over the 20 metrics.
pub fn composite(
    candidate: &BTreeMap<String, f64>,
    baseline: &BTreeMap<String, f64>,
    rule: WinRule,
) -> Result<CompositeScores> {
    let mut won = Vec::with_capacity(METRICS.len());
    let mut group_wins = [0usize; 3];
    let mut group_size = [0usize; 3];
    for (name, group, higher) in METRICS {
        let get = |m: &BTreeMap<String, f64>| m.get(name).copied().ok_or_else(|| Error::MissingMetric(name.into()));
        let (c, b) = (get(candidate)?, get(baseline)?);
        let better = if higher { c > b } else { c < b };
        let win = better || (rule == WinRule::TiesCount && c == b);
        let gi = group as usize;
        group_size[gi] += 1;
        if win {
            group_wins[gi] += 1;
        }
        won.push((name.to_string(), win));
    }
    let wins: usize = group_wins.iter().sum();
    let frac = |g: MetricGroup| group_wins[g as usize] as f64 / group_size[g as usize] as f64;
    Ok(CompositeScores {
        outcome_composite: frac(MetricGroup::Outcome),
        pagegen_mean_composite: frac(MetricGroup::PageGenMean),
        pagegen_var_composite: frac(MetricGroup::PageGenVar),
        overall_composite: wins as f64 / METRICS.len() as f64,
        wins,
        won,
    })
}

/// Builds a metric map from values listed in [`METRICS`] order.
pub fn metric_row(values: &[f64; 20]) -> BTreeMap<String, f64> {
    METRICS
        .iter()
        .zip(values)
        .map(|((name, _, _), &v)| (name.to_string(), v))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(v: f64) -> BTreeMap<String, f64> {
        metric_row(&[v; 20])
    }

    #[test]
    fn identical_reports_score_zero() {
        let c = composite(&row(0.5), &row(0.5), WinRule::Strict).unwrap();
        assert_eq!(c.overall_composite, 0.0);
        assert_eq!(c.pagegen_var_composite, 0.0);
        let c = composite(&row(0.5), &row(0.5), WinRule::TiesCount).unwrap();
        assert_eq!(c.overall_composite, 1.0);
    }

    #[test]
    fn better_everywhere_scores_one() {
        let mut cand = row(0.6);
        let mut base = row(0.5);
        for (name, group, _) in METRICS {
            if group == MetricGroup::PageGenVar {
                cand.insert(name.into(), 0.1);
                base.insert(name.into(), 0.2);
            }
        }
        let c = composite(&cand, &base, WinRule::Strict).unwrap();
        assert_eq!(c.overall_composite, 1.0);
        assert_eq!(c.wins, 20);
    }

    #[test]
    fn missing_metric_is_an_error() {
        let mut cand = row(0.5);
        cand.remove("F1");
        assert!(matches!(composite(&cand, &row(0.5), WinRule::Strict), Err(Error::MissingMetric(m)) if m == "F1"));
    }
}
