//! Selector and critic losses, as plain functions and as graph builders.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::cluster::logits_graph;
use crate::error::{Error, Result};
use crate::predictor::argmax;
use crate::tensor::{Graph, NodeId, ParamSet, Scalar, Tensor};

/// `Σ_k π_k · nll_k` for one sample.
pub fn loss_l1(pi: &[f64], nll: &[f64]) -> Result<f64> {
    if pi.len() != nll.len() {
        return Err(Error::LengthMismatch {
            what: "π vs per-cluster nll",
            expected: pi.len(),
            got: nll.len(),
        });
    }
    Ok(pi.iter().zip(nll).map(|(p, l)| p * l).sum())
}

/// Shannon entropy in nats with `0 · ln 0 = 0`.
pub fn loss_l2(pi: &[f64]) -> f64 {
    0.0 - pi.iter().filter(|&&p| p > 0.0).map(|&p| p * p.ln()).sum::<f64>()
}

/// `σ(−Σ_{k<k'} ‖e_k − e_k'‖₁)`; a single centroid gives `σ(0) = 0.5`.
pub fn loss_l3(centroids: &[Vec<f64>]) -> f64 {
    let mut d = 0.0;
    for a in 0..centroids.len() {
        for b in a + 1..centroids.len() {
            d += centroids[a].iter().zip(&centroids[b]).map(|(x, y)| (x - y).abs()).sum::<f64>();
        }
    }
    1.0 / (1.0 + d.exp())
}

pub fn loss_overall(l1: f64, l2: f64, l3: f64, alpha: f64, beta: f64) -> f64 {
    l1 + alpha * l2 + beta * l3
}

/// Per-cluster critic loss for a batch: mean nll over the samples whose
/// argmax is that cluster, 0 for clusters with no samples.
pub fn critic_losses(pi: &[Vec<f64>], nll: &[Vec<f64>]) -> Result<Vec<f64>> {
    let k = pi.first().map_or(0, Vec::len);
    let mut sum = vec![0.0; k];
    let mut count = vec![0usize; k];
    for (p, l) in pi.iter().zip(nll) {
        if p.len() != k || l.len() != k {
            return Err(Error::LengthMismatch {
                what: "π vs per-cluster nll",
                expected: k,
                got: l.len(),
            });
        }
        let j = argmax_f64(p);
        sum[j] += l[j];
        count[j] += 1;
    }
    Ok(sum
        .iter()
        .zip(&count)
        .map(|(&s, &c)| if c == 0 { 0.0 } else { s / c as f64 })
        .collect())
}

pub(crate) fn argmax_f64(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Logged decomposition of the selector objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l1: f64,
    pub l2: f64,
    pub l3: f64,
    pub l_overall: f64,
}

impl LossBreakdown {
    pub fn new(l1: f64, l2: f64, l3: f64, alpha: f64, beta: f64) -> Self {
        LossBreakdown {
            l1,
            l2,
            l3,
            l_overall: loss_overall(l1, l2, l3, alpha, beta),
        }
    }
}

/// Nodes of a recorded selector objective.
pub struct ObjectiveNodes {
    pub pi: NodeId,
    pub l1: NodeId,
    pub l2: NodeId,
    pub l3: NodeId,
    pub l_overall: NodeId,
    /// Soft centroids actually used by the L3 term, `[K, dim]`.
    pub centroids: Vec<Vec<f64>>,
}

/// Mass below which a batch soft centroid is replaced by the dictionary entry.
pub const MIN_CENTROID_MASS: f64 = 1e-6;

/// Records `L_O = L1 + α L2 + β L3` for the selector with the predictors'
/// per-sample nlls held constant.
///
/// `z` is `[B, dim]`, `nll` is `[B, K]`. L3 uses π-weighted batch centroids;
/// a cluster with (near) zero batch mass falls back to `dictionary[k]`.
pub fn selector_objective<T: Scalar>(
    g: &mut Graph<T>,
    params: &BTreeMap<String, NodeId>,
    z: &Tensor<T>,
    nll: &Tensor<T>,
    dictionary: &[Vec<f32>],
    alpha: f64,
    beta: f64,
) -> Result<ObjectiveNodes> {
    let b = z.rows();
    let k = nll.cols();
    if nll.rows() != b || dictionary.len() != k {
        return Err(Error::LengthMismatch {
            what: "objective inputs",
            expected: b * k,
            got: nll.len(),
        });
    }
    let inv_b = T::from_f64(1.0 / b as f64);
    let zi = g.input(z.clone());
    let logits = logits_graph(g, params, zi)?;
    if g.value(logits).cols() != k {
        return Err(Error::LengthMismatch {
            what: "selector width vs clusters",
            expected: k,
            got: g.value(logits).cols(),
        });
    }
    let logp = g.log_softmax(logits);
    let pi = g.exp(logp);

    let nll_in = g.input(nll.clone());
    let weighted = g.mul(pi, nll_in)?;
    let s1 = g.sum(weighted);
    let l1 = g.scale(s1, inv_b);

    let plogp = g.mul(pi, logp)?;
    let s2 = g.sum(plogp);
    let l2 = g.scale(s2, -inv_b);

    let (l3, centroids) = if k == 1 {
        let half = g.input(Tensor::scalar(T::from_f64(0.5)));
        (half, vec![dictionary[0].iter().map(|&v| v as f64).collect()])
    } else {
        soft_centroid_l3(g, pi, zi, dictionary)?
    };

    let a = g.scale(l2, T::from_f64(alpha));
    let bl = g.scale(l3, T::from_f64(beta));
    let lo = g.add(l1, a)?;
    let lo = g.add(lo, bl)?;
    Ok(ObjectiveNodes {
        pi,
        l1,
        l2,
        l3,
        l_overall: lo,
        centroids,
    })
}

fn soft_centroid_l3<T: Scalar>(
    g: &mut Graph<T>,
    pi: NodeId,
    z: NodeId,
    dictionary: &[Vec<f32>],
) -> Result<(NodeId, Vec<Vec<f64>>)> {
    let k = dictionary.len();
    let dim = g.value(z).cols();
    let mass = g.sum_over_rows(pi);
    let dead: Vec<bool> = g
        .value(mass)
        .data()
        .iter()
        .map(|m| m.as_f64() < MIN_CENTROID_MASS)
        .collect();
    // Dead rows divide by 1 instead of ~0 and are then masked out.
    let guard = g.input(Tensor::new(
        vec![k],
        dead.iter().map(|&d| if d { T::one() } else { T::zero() }).collect(),
    )?);
    let safe_mass = g.add(mass, guard)?;
    let pit = g.transpose(pi)?;
    let sums = g.matmul(pit, z)?;
    let soft = g.div_rows(sums, safe_mass)?;
    let mut mask = Vec::with_capacity(k * dim);
    let mut fallback = Vec::with_capacity(k * dim);
    for (j, row) in dictionary.iter().enumerate() {
        for &v in row {
            mask.push(if dead[j] { T::zero() } else { T::one() });
            fallback.push(if dead[j] { T::from_f64(v as f64) } else { T::zero() });
        }
    }
    let mask = g.input(Tensor::new(vec![k, dim], mask)?);
    let fallback = g.input(Tensor::new(vec![k, dim], fallback)?);
    let live = g.mul(soft, mask)?;
    let c = g.add(live, fallback)?;

    let pairs = k * (k - 1) / 2;
    let mut p = vec![T::zero(); pairs * k];
    let mut row = 0;
    for a in 0..k {
        for b in a + 1..k {
            p[row * k + a] = T::one();
            p[row * k + b] = -T::one();
            row += 1;
        }
    }
    let pm = g.input(Tensor::new(vec![pairs, k], p)?);
    let diffs = g.matmul(pm, c)?;
    let abs = g.abs(diffs);
    let d = g.sum(abs);
    let neg = g.scale(d, -T::one());
    let l3 = g.sigmoid(neg);
    let cv = g.value(c);
    let centroids = (0..k).map(|j| cv.row(j).iter().map(|v| v.as_f64()).collect()).collect();
    Ok((l3, centroids))
}

/// Evaluates the objective in `f64` from selector parameters, for logging
/// and for the identity checks. Returns the breakdown and π rows.
pub fn evaluate_objective(
    selector: &ParamSet,
    z: &Tensor,
    nll: &Tensor,
    dictionary: &[Vec<f32>],
    alpha: f64,
    beta: f64,
) -> Result<(LossBreakdown, Vec<Vec<f64>>)> {
    let p64 = selector.cast::<f64>();
    let mut g = Graph::<f64>::new();
    let binds = p64.bind_frozen(&mut g);
    let nodes = selector_objective(&mut g, &binds, &z.cast(), &nll.cast(), dictionary, alpha, beta)?;
    let pi_t = g.value(nodes.pi);
    let pi: Vec<Vec<f64>> = (0..pi_t.rows()).map(|i| pi_t.row(i).to_vec()).collect();
    let nll_rows: Vec<Vec<f64>> = (0..nll.rows())
        .map(|i| nll.row(i).iter().map(|&v| v as f64).collect())
        .collect();
    let n = pi.len() as f64;
    let mut l1 = 0.0;
    let mut l2 = 0.0;
    for (p, l) in pi.iter().zip(&nll_rows) {
        l1 += loss_l1(p, l)?;
        l2 += loss_l2(p);
    }
    let l3 = loss_l3(&nodes.centroids);
    Ok((LossBreakdown::new(l1 / n, l2 / n, l3, alpha, beta), pi))
}

/// Hard assignment of each π row (lowest index on ties).
pub fn hard_assign(pi: &Tensor) -> Vec<usize> {
    (0..pi.rows()).map(|i| argmax(pi.row(i))).collect()
}
