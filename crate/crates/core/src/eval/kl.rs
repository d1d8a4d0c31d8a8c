use crate::error::{Error, Result};
use crate::parallel::par_map;
use crate::predictor::Example;
use crate::tensor::SeededRng;
use crate::train::ClusterModel;

/// `Σ p ln(p / q)` with `0 ln 0 = 0`.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(&pi, _)| pi > 0.0)
        .map(|(&pi, &qi)| pi * (pi / qi).ln())
        .sum()
}

/// Mean predicted next-token distribution over each example's target
/// positions, under the predictor of its assigned cluster.
pub fn user_distributions(
    model: &ClusterModel,
    examples: &[Example],
    assignment: &[usize],
    workers: usize,
) -> Result<Vec<Vec<f64>>> {
    if examples.len() != assignment.len() {
        return Err(Error::LengthMismatch {
            what: "cluster assignment",
            expected: examples.len(),
            got: assignment.len(),
        });
    }
    let jobs: Vec<(&Example, usize)> = examples.iter().zip(assignment.iter().copied()).collect();
    par_map(&jobs, workers, |(ex, k)| {
        let predictor = model
            .predictors
            .get(*k)
            .ok_or_else(|| Error::Config(format!("cluster {k} has no predictor")))?;
        let out = predictor.forward_nll(&ex.input, &ex.target)?;
        let d = out.distributions;
        let mut mean = vec![0.0f64; d.cols()];
        for r in 0..d.rows() {
            for (m, &v) in mean.iter_mut().zip(d.row(r)) {
                *m += v as f64;
            }
        }
        mean.iter_mut().for_each(|m| *m /= d.rows() as f64);
        Ok(mean)
    })
    .into_iter()
    .collect()
}

/// Within-cluster spread of predictive distributions: for every user, the
/// KL divergence from the cluster's average distribution, averaged over
/// users. Lower means more homogeneous clusters.
pub fn kl_from_distributions(dists: &[Vec<f64>], assignment: &[usize]) -> Result<f64> {
    if dists.is_empty() {
        return Err(Error::EmptyDataset("kl diagnostic"));
    }
    let k = assignment.iter().max().map_or(0, |m| m + 1);
    let v = dists[0].len();
    let mut centers = vec![vec![0.0f64; v]; k];
    let mut sizes = vec![0usize; k];
    for (d, &c) in dists.iter().zip(assignment) {
        sizes[c] += 1;
        for (a, &x) in centers[c].iter_mut().zip(d) {
            *a += x;
        }
    }
    for (c, &s) in centers.iter_mut().zip(&sizes) {
        if s > 0 {
            c.iter_mut().for_each(|a| *a /= s as f64);
        }
    }
    let total: f64 = dists
        .iter()
        .zip(assignment)
        .map(|(d, &c)| kl_divergence(d, &centers[c]))
        .sum();
    Ok(total / dists.len() as f64)
}

pub fn kl_diagnostic(model: &ClusterModel, examples: &[Example], assignment: &[usize], workers: usize) -> Result<f64> {
    kl_from_distributions(&user_distributions(model, examples, assignment, workers)?, assignment)
}

/// A uniformly random relabeling with the same cluster sizes.
pub fn random_assignment(assignment: &[usize], seed: u64) -> Vec<usize> {
    let mut a = assignment.to_vec();
    SeededRng::new(seed).split_named("random-assignment").shuffle(&mut a);
    a
}
