use serde::Serialize;

use crate::error::{Error, Result};
use crate::tensor::{SeededRng, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KMeansResult {
    /// `k` centroids of the point dimension.
    pub centroids: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    /// Within-cluster SSE after each assignment step.
    pub sse_history: Vec<f64>,
    pub iterations: usize,
}

impl KMeansResult {
    pub fn sse(&self) -> f64 {
        *self.sse_history.last().unwrap_or(&0.0)
    }

    pub fn counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.centroids.len()];
        for &l in &self.labels {
            c[l] += 1;
        }
        c
    }
}

pub(crate) fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index of the nearest centroid; ties go to the lower index.
pub fn nearest(point: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centroids.iter().enumerate() {
        let d = sq_dist(point, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

fn rows(points: &Tensor) -> Vec<Vec<f64>> {
    (0..points.rows())
        .map(|i| points.row(i).iter().map(|&v| v as f64).collect())
        .collect()
}

/// Lloyd's algorithm with k-means++ seeding.
///
/// Stops when no centroid moves more than `tol` (Euclidean) or after
/// `max_iters`. A cluster that loses all its points is moved onto the point
/// farthest from its current centroid.
pub fn kmeans(points: &Tensor, k: usize, seed: u64, max_iters: usize, tol: f64) -> Result<KMeansResult> {
    let x = rows(points);
    let n = x.len();
    if k == 0 {
        return Err(Error::Config("k must be positive".into()));
    }
    if k > n {
        return Err(Error::Config(format!("k = {k} exceeds the {n} points")));
    }
    let mut rng = SeededRng::new(seed).split_named("kmeans++");
    let mut centroids = vec![x[rng.below(n)].clone()];
    let mut d2: Vec<f64> = x.iter().map(|p| sq_dist(p, &centroids[0])).collect();
    while centroids.len() < k {
        let next = rng.weighted_index(&d2);
        centroids.push(x[next].clone());
        for (d, p) in d2.iter_mut().zip(&x) {
            *d = d.min(sq_dist(p, &x[next]));
        }
    }

    let dim = x[0].len();
    let mut labels = vec![0; n];
    let mut sse_history = Vec::new();
    let mut iterations = 0;
    for _ in 0..max_iters.max(1) {
        iterations += 1;
        let mut sse = 0.0;
        for (l, p) in labels.iter_mut().zip(&x) {
            let (j, d) = nearest(p, &centroids);
            *l = j;
            sse += d;
        }
        sse_history.push(sse);

        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &l) in x.iter().zip(&labels) {
            counts[l] += 1;
            for (s, v) in sums[l].iter_mut().zip(p) {
                *s += v;
            }
        }
        let mut shift: f64 = 0.0;
        for j in 0..k {
            let new = if counts[j] > 0 {
                sums[j].iter().map(|s| s / counts[j] as f64).collect()
            } else {
                let far = (0..n)
                    .max_by(|&a, &b| {
                        sq_dist(&x[a], &centroids[labels[a]])
                            .total_cmp(&sq_dist(&x[b], &centroids[labels[b]]))
                            .then(b.cmp(&a))
                    })
                    .expect("n > 0");
                x[far].clone()
            };
            shift = shift.max(sq_dist(&new, &centroids[j]).sqrt());
            centroids[j] = new;
        }
        if shift < tol {
            break;
        }
    }
    let mut sse = 0.0;
    for (l, p) in labels.iter_mut().zip(&x) {
        let (j, d) = nearest(p, &centroids);
        *l = j;
        sse += d;
    }
    sse_history.push(sse);
    Ok(KMeansResult {
        centroids,
        labels,
        sse_history,
        iterations,
    })
}
