use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

const MAX_N: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BleuScore {
    pub value: f64,
    /// Hypothesis and reference are identical token sequences.
    pub exact_match: bool,
}

fn ngrams<T: Ord + Clone>(tokens: &[T], n: usize) -> BTreeMap<&[T], usize> {
    let mut m = BTreeMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *m.entry(w).or_default() += 1;
        }
    }
    m
}

/// Clipped matches and hypothesis n-gram totals for n = 1..=4.
fn counts<T: Ord + Clone>(hyp: &[T], reference: &[T]) -> ([usize; MAX_N], [usize; MAX_N]) {
    let mut matched = [0; MAX_N];
    let mut total = [0; MAX_N];
    for n in 1..=MAX_N {
        let h = ngrams(hyp, n);
        let r = ngrams(reference, n);
        matched[n - 1] = h.iter().map(|(g, &c)| c.min(r.get(g).copied().unwrap_or(0))).sum();
        total[n - 1] = hyp.len().saturating_sub(n - 1);
    }
    (matched, total)
}

/// Corpus BLEU over (hypothesis, reference) pairs: uniform weights over
/// 1..4-grams, add-one smoothing for n ≥ 2, brevity penalty on total
/// lengths. An empty hypothesis corpus or a zero unigram precision gives 0.
pub fn corpus_bleu<T: Ord + Clone>(pairs: &[(Vec<T>, Vec<T>)]) -> f64 {
    let mut matched = [0usize; MAX_N];
    let mut total = [0usize; MAX_N];
    let (mut hyp_len, mut ref_len) = (0usize, 0usize);
    for (h, r) in pairs {
        let (m, t) = counts(h, r);
        for n in 0..MAX_N {
            matched[n] += m[n];
            total[n] += t[n];
        }
        hyp_len += h.len();
        ref_len += r.len();
    }
    if hyp_len == 0 || matched[0] == 0 {
        return 0.0;
    }
    let mut log_p = (matched[0] as f64 / total[0] as f64).ln();
    for n in 1..MAX_N {
        log_p += ((matched[n] + 1) as f64 / (total[n] + 1) as f64).ln();
    }
    let bp = if hyp_len >= ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    };
    bp * (log_p / MAX_N as f64).exp()
}

pub fn bleu<T: Ord + Clone>(hyp: &[T], reference: &[T]) -> BleuScore {
    BleuScore {
        value: corpus_bleu(&[(hyp.to_vec(), reference.to_vec())]),
        exact_match: hyp == reference,
    }
}
