use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::corpus::{Vocabulary, BOS, EOS};
use crate::error::{Error, Result};

/// `num / den`, or 0 when the denominator is 0.
pub(crate) fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Page-level comparison of one generated session against the actual one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PageGenMetrics {
    pub hr: f64,
    pub ioa: f64,
    pub iop: f64,
    pub iou: f64,
    pub val_p: f64,
    pub new_p: f64,
}

/// Set-based overlap metrics. `generated` holds the decoded tokens between
/// the forced BOS and the final EOS; tokens that are not vocabulary pages
/// count against Val-P and are dropped before the set comparisons.
pub fn page_gen_metrics(
    generated: &[String],
    valid: impl Fn(&str) -> bool,
    actual: &BTreeSet<String>,
    input: &BTreeSet<String>,
) -> PageGenMetrics {
    let valid_tokens: Vec<&String> = generated.iter().filter(|t| valid(t)).collect();
    let g: BTreeSet<&str> = valid_tokens.iter().map(|s| s.as_str()).collect();
    let a: BTreeSet<&str> = actual.iter().map(String::as_str).collect();
    let inter = g.intersection(&a).count();
    let union = g.union(&a).count();
    let new = g.iter().filter(|p| !input.contains(**p)).count();
    PageGenMetrics {
        hr: if inter > 0 { 1.0 } else { 0.0 },
        ioa: ratio(inter, a.len()),
        iop: ratio(inter, g.len()),
        iou: ratio(inter, union),
        val_p: ratio(valid_tokens.len(), generated.len()),
        new_p: ratio(new, g.len()),
    }
}

/// Everything recorded about one evaluated user.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerUserEval {
    pub user_id: String,
    pub cluster: usize,
    pub generated: Vec<String>,
    pub actual: Vec<String>,
    #[serde(flatten)]
    pub pages: PageGenMetrics,
    pub pred_cart: bool,
    pub actual_cart: bool,
    pub pred_purchase: bool,
    pub actual_purchase: bool,
    pub bleu: f64,
}

/// Names of the outcome pages.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OutcomePages {
    pub cart: String,
    pub purchase: String,
}

impl Default for OutcomePages {
    fn default() -> Self {
        OutcomePages {
            cart: crate::corpus::CART.into(),
            purchase: crate::corpus::PURCHASE.into(),
        }
    }
}

/// Strips the forced BOS and the terminating EOS and decodes the rest; ids
/// outside the vocabulary decode to `[UNK]`.
pub fn generated_tokens(ids: &[usize], vocab: &Vocabulary) -> Vec<String> {
    let mut s = ids;
    if s.first() == Some(&BOS) {
        s = &s[1..];
    }
    if s.last() == Some(&EOS) {
        s = &s[..s.len() - 1];
    }
    s.iter()
        .map(|&id| vocab.token(id).unwrap_or(crate::corpus::SPECIAL_NAMES[crate::corpus::UNK]).to_string())
        .collect()
}

/// Binary confusion counts.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
}

impl Confusion {
    pub fn from_flags(flags: impl IntoIterator<Item = (bool, bool)>) -> Self {
        let mut c = Confusion::default();
        for (pred, actual) in flags {
            match (pred, actual) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => c.tn += 1,
            }
        }
        c
    }

    pub fn n(&self) -> usize {
        self.tp + self.fp + self.fn_ + self.tn
    }

    pub fn accuracy(&self) -> f64 {
        ratio(self.tp + self.tn, self.n())
    }

    pub fn recall(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }

    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp)
    }

    pub fn f1(&self) -> f64 {
        let (p, r) = (self.precision(), self.recall());
        if p + r > 0.0 {
            2.0 * p * r / (p + r)
        } else {
            0.0
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutcomeMetrics {
    pub acc_cart: f64,
    pub acc_purchase: f64,
    pub acc_either: f64,
    pub rec_cart: f64,
    pub rec_purchase: f64,
    pub rec_either: f64,
    pub prec_cart: f64,
    pub prec_purchase: f64,
    pub prec_either: f64,
    pub f1_either: f64,
}

pub fn outcome_metrics(evals: &[PerUserEval]) -> OutcomeMetrics {
    let cart = Confusion::from_flags(evals.iter().map(|e| (e.pred_cart, e.actual_cart)));
    let pur = Confusion::from_flags(evals.iter().map(|e| (e.pred_purchase, e.actual_purchase)));
    let either = Confusion::from_flags(
        evals
            .iter()
            .map(|e| (e.pred_cart || e.pred_purchase, e.actual_cart || e.actual_purchase)),
    );
    OutcomeMetrics {
        acc_cart: cart.accuracy(),
        acc_purchase: pur.accuracy(),
        acc_either: either.accuracy(),
        rec_cart: cart.recall(),
        rec_purchase: pur.recall(),
        rec_either: either.recall(),
        prec_cart: cart.precision(),
        prec_purchase: pur.precision(),
        prec_either: either.precision(),
        f1_either: either.f1(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarianceMetrics {
    pub hr: f64,
    pub ioa: f64,
    pub iop: f64,
    pub iou: f64,
}

/// Population variance (divide by N).
pub fn population_variance(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n
}

pub fn variance_metrics(evals: &[PerUserEval]) -> Result<VarianceMetrics> {
    if evals.len() < 2 {
        return Err(Error::Config(format!("variance needs at least 2 users, got {}", evals.len())));
    }
    let var = |f: fn(&PageGenMetrics) -> f64| population_variance(&evals.iter().map(|e| f(&e.pages)).collect::<Vec<_>>());
    Ok(VarianceMetrics {
        hr: var(|p| p.hr),
        ioa: var(|p| p.ioa),
        iop: var(|p| p.iop),
        iou: var(|p| p.iou),
    })
}

/// Aggregate metrics over a group of users.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub n: usize,
    pub page_gen: PageGenMetrics,
    pub outcome: OutcomeMetrics,
    /// Absent for groups with fewer than two users.
    pub variance: Option<VarianceMetrics>,
    pub bleu: f64,
    /// Share of users whose generation equals the actual session exactly.
    pub exact_match: f64,
}

impl MetricsReport {
    pub fn from_evals(evals: &[PerUserEval], corpus_bleu: f64) -> Result<Self> {
        if evals.is_empty() {
            return Err(Error::EmptyDataset("metrics"));
        }
        let n = evals.len();
        let mean = |f: fn(&PageGenMetrics) -> f64| evals.iter().map(|e| f(&e.pages)).sum::<f64>() / n as f64;
        Ok(MetricsReport {
            n,
            page_gen: PageGenMetrics {
                hr: mean(|p| p.hr),
                ioa: mean(|p| p.ioa),
                iop: mean(|p| p.iop),
                iou: mean(|p| p.iou),
                val_p: mean(|p| p.val_p),
                new_p: mean(|p| p.new_p),
            },
            outcome: outcome_metrics(evals),
            variance: if n >= 2 { Some(variance_metrics(evals)?) } else { None },
            bleu: corpus_bleu,
            exact_match: ratio(evals.iter().filter(|e| e.generated == e.actual).count(), n),
        })
    }

    /// The 20 compared metrics by canonical name (variances only when present).
    pub fn as_map(&self) -> BTreeMap<String, f64> {
        let p = &self.page_gen;
        let o = &self.outcome;
        let mut m: BTreeMap<String, f64> = [
            ("HR", p.hr),
            ("IoA", p.ioa),
            ("IoP", p.iop),
            ("IoU", p.iou),
            ("New-P", p.new_p),
            ("Val-P", p.val_p),
            ("AccCart", o.acc_cart),
            ("AccPur", o.acc_purchase),
            ("AccC/P", o.acc_either),
            ("RecCart", o.rec_cart),
            ("RecPur", o.rec_purchase),
            ("RecC/P", o.rec_either),
            ("PrecCart", o.prec_cart),
            ("PrecPur", o.prec_purchase),
            ("PrecC/P", o.prec_either),
            ("F1", o.f1_either),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect();
        if let Some(v) = &self.variance {
            m.insert("Var-HR".into(), v.hr);
            m.insert("Var-IoA".into(), v.ioa);
            m.insert("Var-IoP".into(), v.iop);
            m.insert("Var-IoU".into(), v.iou);
        }
        m
    }
}
