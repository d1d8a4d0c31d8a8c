//! Next-session generation and the evaluation metric suite.

mod bleu;
mod composite;
mod kl;
mod metrics;

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::corpus::{SessionDataset, UserRecord};
use crate::error::{Error, Result};
use crate::parallel::par_map;
use crate::predictor::{Example, GenerateOptions};
use crate::train::ClusterModel;

pub use bleu::{bleu, corpus_bleu, BleuScore};
pub use composite::{composite, metric_row, CompositeScores, MetricGroup, WinRule, METRICS};
pub use kl::{kl_diagnostic, kl_divergence, kl_from_distributions, random_assignment, user_distributions};
pub use metrics::{
    generated_tokens, outcome_metrics, page_gen_metrics, population_variance, variance_metrics, Confusion,
    MetricsReport, OutcomeMetrics, OutcomePages, PageGenMetrics, PerUserEval, VarianceMetrics,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalOptions {
    pub generate: GenerateOptions,
    pub outcomes: OutcomePages,
    pub workers: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            generate: GenerateOptions::default(),
            outcomes: OutcomePages::default(),
            workers: 1,
        }
    }
}

/// Embeds the user, picks a cluster, and generates with that cluster's predictor.
pub fn route_and_generate(model: &ClusterModel, record: &UserRecord, opts: &GenerateOptions) -> Result<Vec<usize>> {
    let ds = SessionDataset::new(vec![record.clone()], crate::corpus::SplitTag::All);
    let k = model.route(&ds)?[0];
    let ex = Example::from_record(record, &model.vocab, model.predictors[k].config.max_seq_len)?;
    model.predictors[k].generate(&ex.input, opts)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterRow {
    pub cluster: usize,
    #[serde(flatten)]
    pub metrics: MetricsReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub model: String,
    /// Users with an empty actual session, left out of every aggregate.
    pub excluded: usize,
    /// Routed per-token NLL over the evaluated users.
    pub nll_per_token: f64,
    pub perplexity: f64,
    pub clusters: Vec<ClusterRow>,
    pub combined: MetricsReport,
    pub conventions: Conventions,
    pub users: Vec<PerUserEval>,
}

/// Choices that affect metric values, recorded next to them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Conventions {
    pub overlap: String,
    pub empty_denominator: String,
    pub variance: String,
    pub new_p_reference: String,
    pub decoding: String,
}

impl Conventions {
    fn current(opts: &GenerateOptions) -> Self {
        Conventions {
            overlap: "set".into(),
            empty_denominator: "0".into(),
            variance: "population (divide by N)".into(),
            new_p_reference: "the user's own input sessions".into(),
            decoding: match opts.sampling {
                None => format!("greedy, max {} new tokens", opts.max_new_tokens),
                Some(s) => format!(
                    "sampling T={} top_k={} seed={}, max {} new tokens",
                    s.temperature, s.top_k, s.seed, opts.max_new_tokens
                ),
            },
        }
    }
}

/// Generates a next session for every user in `dataset` and scores it.
pub fn evaluate(model: &ClusterModel, dataset: &SessionDataset, opts: &EvalOptions) -> Result<EvaluationReport> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset("evaluation"));
    }
    let examples = model.examples(dataset)?;
    let routes = model.route(dataset)?;
    let nll = model.routed_nll(&examples, &routes, opts.workers)?;
    let tokens: usize = examples.iter().map(|e| e.target.len()).sum();
    let nll_per_token = nll.iter().sum::<f64>() / tokens as f64;

    let jobs: Vec<usize> = (0..dataset.len()).collect();
    let evals = par_map(&jobs, opts.workers, |&i| {
        let record = &dataset.records[i];
        if record.actual_session.is_empty() {
            return Ok(None);
        }
        let k = routes[i];
        let ids = model.predictors[k].generate(&examples[i].input, &opts.generate)?;
        Ok::<_, Error>(Some(score_user(model, record, k, &ids, &opts.outcomes)))
    });
    let mut users = Vec::with_capacity(evals.len());
    let mut excluded = 0;
    for e in evals {
        match e? {
            Some(u) => users.push(u),
            None => excluded += 1,
        }
    }
    let combined = report_for(&users)?;
    let mut clusters = Vec::new();
    for k in 0..model.k() {
        let mine: Vec<PerUserEval> = users.iter().filter(|u| u.cluster == k).cloned().collect();
        if !mine.is_empty() {
            clusters.push(ClusterRow {
                cluster: k,
                metrics: report_for(&mine)?,
            });
        }
    }
    Ok(EvaluationReport {
        model: model.name.clone(),
        excluded,
        nll_per_token,
        perplexity: nll_per_token.exp(),
        clusters,
        combined,
        conventions: Conventions::current(&opts.generate),
        users,
    })
}

fn report_for(users: &[PerUserEval]) -> Result<MetricsReport> {
    let pairs: Vec<(Vec<String>, Vec<String>)> = users
        .iter()
        .map(|u| {
            (
                u.generated.iter().filter(|t| !is_special(t)).cloned().collect(),
                u.actual.clone(),
            )
        })
        .collect();
    MetricsReport::from_evals(users, corpus_bleu(&pairs))
}

fn is_special(token: &str) -> bool {
    crate::corpus::SPECIAL_NAMES.contains(&token)
}

/// Scores one generated id sequence for one user.
pub fn score_user(
    model: &ClusterModel,
    record: &UserRecord,
    cluster: usize,
    ids: &[usize],
    outcomes: &OutcomePages,
) -> PerUserEval {
    let generated = generated_tokens(ids, &model.vocab);
    let actual = record.actual_session.pages.clone();
    let actual_set: BTreeSet<String> = actual.iter().cloned().collect();
    let input: BTreeSet<String> = record.input_pages().map(str::to_string).collect();
    let pages = page_gen_metrics(
        &generated,
        |t| !is_special(t) && model.vocab.get(t).is_some(),
        &actual_set,
        &input,
    );
    let has = |s: &[String], p: &str| s.iter().any(|t| t == p);
    let clean: Vec<String> = generated.iter().filter(|t| !is_special(t)).cloned().collect();
    PerUserEval {
        user_id: record.user_id.clone(),
        cluster,
        pred_cart: has(&generated, &outcomes.cart),
        actual_cart: has(&actual, &outcomes.cart),
        pred_purchase: has(&generated, &outcomes.purchase),
        actual_purchase: has(&actual, &outcomes.purchase),
        bleu: bleu(&clean, &actual).value,
        generated,
        actual,
        pages,
    }
}

/// Writes one row per user.
pub fn write_user_csv<W: Write>(users: &[PerUserEval], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record([
        "user_id", "cluster", "hr", "ioa", "iop", "iou", "val_p", "new_p", "pred_cart", "actual_cart",
        "pred_purchase", "actual_purchase", "bleu", "generated", "actual",
    ])?;
    for u in users {
        let p = &u.pages;
        out.write_record([
            u.user_id.clone(),
            u.cluster.to_string(),
            p.hr.to_string(),
            p.ioa.to_string(),
            p.iop.to_string(),
            p.iou.to_string(),
            p.val_p.to_string(),
            p.new_p.to_string(),
            u.pred_cart.to_string(),
            u.actual_cart.to_string(),
            u.pred_purchase.to_string(),
            u.actual_purchase.to_string(),
            u.bleu.to_string(),
            u.generated.join(" "),
            u.actual.join(" "),
        ])?;
    }
    out.flush()?;
    Ok(())
}

/// Writes the metric table: one row per cluster plus `Combined`.
pub fn write_report_csv<W: Write>(report: &EvaluationReport, w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    let mut header = vec!["row".to_string(), "n".to_string()];
    header.extend(METRICS.iter().map(|(n, _, _)| n.to_string()));
    header.push("BLEU".into());
    out.write_record(&header)?;
    let mut rows: Vec<(String, &MetricsReport)> = report
        .clusters
        .iter()
        .map(|c| (format!("cluster {}", c.cluster), &c.metrics))
        .collect();
    rows.push(("Combined".into(), &report.combined));
    for (label, m) in rows {
        let map = m.as_map();
        let mut rec = vec![label, m.n.to_string()];
        rec.extend(
            METRICS
                .iter()
                .map(|(n, _, _)| map.get(*n).map(|v| v.to_string()).unwrap_or_default()),
        );
        rec.push(m.bleu.to_string());
        out.write_record(&rec)?;
    }
    out.flush()?;
    Ok(())
}

/// Writes group composites followed by per-metric verdicts.
pub fn write_composite_csv<W: Write>(scores: &CompositeScores, w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["item", "value"])?;
    for (k, v) in [
        ("outcome_composite", scores.outcome_composite),
        ("pagegen_mean_composite", scores.pagegen_mean_composite),
        ("pagegen_var_composite", scores.pagegen_var_composite),
        ("overall_composite", scores.overall_composite),
    ] {
        out.write_record([k.to_string(), v.to_string()])?;
    }
    for (name, won) in &scores.won {
        out.write_record([format!("win:{name}"), u8::from(*won).to_string()])?;
    }
    out.flush()?;
    Ok(())
}

/// Grouped bar chart of HR/IoA/IoP/IoU per cluster and Combined.
pub fn report_svg(report: &EvaluationReport) -> String {
    const METRIC_NAMES: [&str; 4] = ["HR", "IoA", "IoP", "IoU"];
    const COLORS: [&str; 4] = ["#4c72b0", "#dd8452", "#55a868", "#c44e52"];
    let mut rows: Vec<(String, &MetricsReport)> = report
        .clusters
        .iter()
        .map(|c| (format!("cluster {}", c.cluster), &c.metrics))
        .collect();
    rows.push(("Combined".into(), &report.combined));
    let (bar, gap, height, top) = (14.0, 24.0, 200.0, 30.0);
    let group_w = bar * 4.0 + gap;
    let width = 60.0 + group_w * rows.len() as f64;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{}" font-family="sans-serif" font-size="10">"#,
        height + top + 40.0
    );
    let _ = writeln!(s, r#"<text x="10" y="16" font-size="12">{}</text>"#, escape(&report.model));
    let _ = writeln!(
        s,
        r#"<line x1="40" y1="{0}" x2="{1}" y2="{0}" stroke="black"/>"#,
        top + height,
        width - 10.0
    );
    for (gi, (label, m)) in rows.iter().enumerate() {
        let x0 = 50.0 + gi as f64 * group_w;
        let vals = [m.page_gen.hr, m.page_gen.ioa, m.page_gen.iop, m.page_gen.iou];
        for (mi, v) in vals.iter().enumerate() {
            let h = v.clamp(0.0, 1.0) * height;
            let _ = writeln!(
                s,
                r#"<rect x="{:.1}" y="{:.1}" width="{bar}" height="{:.1}" fill="{}"><title>{} {:.3}</title></rect>"#,
                x0 + mi as f64 * bar,
                top + height - h,
                h,
                COLORS[mi],
                METRIC_NAMES[mi],
                v
            );
        }
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}">{}</text>"#,
            x0,
            top + height + 14.0,
            escape(label)
        );
    }
    for (mi, name) in METRIC_NAMES.iter().enumerate() {
        let x = 50.0 + mi as f64 * 50.0;
        let y = top + height + 30.0;
        let _ = writeln!(
            s,
            r#"<rect x="{x}" y="{}" width="8" height="8" fill="{}"/><text x="{}" y="{y}">{name}</text>"#,
            y - 8.0,
            COLORS[mi],
            x + 11.0
        );
    }
    s.push_str("</svg>\n");
    s
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
