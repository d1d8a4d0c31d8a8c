//! Page-generation and outcome metrics against brute-force recomputation.

use std::collections::BTreeSet;

use hetlm::eval::{outcome_metrics, page_gen_metrics, PageGenMetrics, PerUserEval};
use proptest::prelude::*;

/// Page names are `p0..p11`; anything starting with `x` is not a page.
fn token() -> impl Strategy<Value = String> {
    prop_oneof![
        8 => (0..12u8).prop_map(|i| format!("p{i}")),
        1 => (0..3u8).prop_map(|i| format!("x{i}")),
    ]
}

fn page_set() -> impl Strategy<Value = BTreeSet<String>> {
    prop::collection::vec((0..12u8).prop_map(|i| format!("p{i}")), 0..8).prop_map(|v| v.into_iter().collect())
}

fn frac(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Deduplicates by linear scan, then counts with nested loops.
fn oracle(generated: &[String], actual: &BTreeSet<String>, input: &BTreeSet<String>) -> PageGenMetrics {
    let actual: Vec<&String> = actual.iter().collect();
    let input: Vec<&String> = input.iter().collect();
    let mut g: Vec<&String> = Vec::new();
    let mut valid = 0;
    for t in generated {
        if t.starts_with('p') {
            valid += 1;
            if !g.contains(&t) {
                g.push(t);
            }
        }
    }
    let mut inter = 0;
    for x in &g {
        if actual.contains(x) {
            inter += 1;
        }
    }
    let mut union = g.len();
    for a in &actual {
        if !g.contains(a) {
            union += 1;
        }
    }
    let mut new = 0;
    for x in &g {
        if !input.contains(x) {
            new += 1;
        }
    }
    PageGenMetrics {
        hr: if inter > 0 { 1.0 } else { 0.0 },
        ioa: frac(inter, actual.len()),
        iop: frac(inter, g.len()),
        iou: frac(inter, union),
        val_p: frac(valid, generated.len()),
        new_p: frac(new, g.len()),
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 200, ..ProptestConfig::default() })]

    #[test]
    fn page_gen_matches_set_oracle(
        generated in prop::collection::vec(token(), 0..10),
        actual in page_set(),
        input in page_set(),
    ) {
        let got = page_gen_metrics(&generated, |t| t.starts_with('p'), &actual, &input);
        prop_assert_eq!(got, oracle(&generated, &actual, &input));
    }

    #[test]
    fn outcomes_match_confusion_recount(flags in prop::collection::vec(any::<(bool, bool, bool, bool)>(), 1..40)) {
        let evals: Vec<PerUserEval> = flags
            .iter()
            .enumerate()
            .map(|(i, &(pc, ac, pp, ap))| PerUserEval {
                user_id: i.to_string(),
                cluster: 0,
                generated: vec![],
                actual: vec![],
                pages: oracle(&[], &BTreeSet::new(), &BTreeSet::new()),
                pred_cart: pc,
                actual_cart: ac,
                pred_purchase: pp,
                actual_purchase: ap,
                bleu: 0.0,
            })
            .collect();
        let m = outcome_metrics(&evals);
        let table = |pairs: Vec<(bool, bool)>| {
            let n = pairs.len();
            let tp = pairs.iter().filter(|&&(p, a)| p && a).count();
            let fp = pairs.iter().filter(|&&(p, a)| p && !a).count();
            let fneg = pairs.iter().filter(|&&(p, a)| !p && a).count();
            let tn = n - tp - fp - fneg;
            let prec = frac(tp, tp + fp);
            let rec = frac(tp, tp + fneg);
            let f1 = if prec + rec > 0.0 { 2.0 * prec * rec / (prec + rec) } else { 0.0 };
            (frac(tp + tn, n), rec, prec, f1)
        };
        let cart = table(flags.iter().map(|f| (f.0, f.1)).collect());
        let pur = table(flags.iter().map(|f| (f.2, f.3)).collect());
        let either = table(flags.iter().map(|f| (f.0 || f.2, f.1 || f.3)).collect());
        prop_assert_eq!((m.acc_cart, m.rec_cart, m.prec_cart), (cart.0, cart.1, cart.2));
        prop_assert_eq!((m.acc_purchase, m.rec_purchase, m.prec_purchase), (pur.0, pur.1, pur.2));
        prop_assert_eq!((m.acc_either, m.rec_either, m.prec_either, m.f1_either), either);
    }
}
