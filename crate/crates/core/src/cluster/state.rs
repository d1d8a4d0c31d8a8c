use serde::{Deserialize, Serialize};

use super::KMeansResult;
use crate::error::{Error, Result};
use crate::predictor::argmax;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochClusterStats {
    pub epoch: usize,
    pub effective_k: usize,
    /// Hard-assignment counts per initial cluster id (0 when inactive).
    pub counts: Vec<usize>,
}

/// Cluster bookkeeping: which initial clusters are alive and the centroid
/// dictionary for the live ones, in selector-column order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterState {
    pub k_init: usize,
    pub active: Vec<bool>,
    pub centroids: Vec<Vec<f32>>,
    pub counts: Vec<usize>,
    pub history: Vec<EpochClusterStats>,
}

impl ClusterState {
    pub fn new(centroids: Vec<Vec<f32>>) -> Result<Self> {
        if centroids.is_empty() {
            return Err(Error::Config("need at least one centroid".into()));
        }
        let k = centroids.len();
        Ok(ClusterState {
            k_init: k,
            active: vec![true; k],
            centroids,
            counts: vec![0; k],
            history: Vec::new(),
        })
    }

    pub fn from_kmeans(result: &KMeansResult) -> Result<Self> {
        let mut s = Self::new(
            result
                .centroids
                .iter()
                .map(|c| c.iter().map(|&v| v as f32).collect())
                .collect(),
        )?;
        s.counts = result.counts();
        Ok(s)
    }

    pub fn effective_k(&self) -> usize {
        self.centroids.len()
    }

    /// Initial ids of the active clusters, in column order.
    pub fn active_ids(&self) -> Vec<usize> {
        (0..self.k_init).filter(|&i| self.active[i]).collect()
    }

    /// Blends the π-weighted batch mean of `z` into each centroid:
    /// `c ← m·c + (1 − m)·Σ π z / Σ π`. Clusters with no mass keep `c`.
    pub fn update_centroids(&mut self, z: &Tensor, pi: &Tensor, momentum: f64) -> Result<()> {
        let k = self.effective_k();
        if pi.cols() != k || pi.rows() != z.rows() {
            return Err(Error::LengthMismatch {
                what: "π rows/cols vs embeddings/clusters",
                expected: z.rows() * k,
                got: pi.len(),
            });
        }
        let dim = z.cols();
        for (j, c) in self.centroids.iter_mut().enumerate() {
            let mut mass = 0.0f64;
            let mut acc = vec![0.0f64; dim];
            for b in 0..z.rows() {
                let w = pi.row(b)[j] as f64;
                mass += w;
                for (a, &v) in acc.iter_mut().zip(z.row(b)) {
                    *a += w * v as f64;
                }
            }
            if mass > 0.0 {
                for (cv, a) in c.iter_mut().zip(acc) {
                    *cv = (momentum * *cv as f64 + (1.0 - momentum) * a / mass) as f32;
                }
            }
        }
        Ok(())
    }

    /// Hard counts per active column from a `[n, K]` probability matrix.
    pub fn hard_counts(pi: &Tensor) -> Vec<usize> {
        let mut c = vec![0; pi.cols()];
        for i in 0..pi.rows() {
            c[argmax(pi.row(i))] += 1;
        }
        c
    }

    /// Deactivates clusters whose share of `counts` is below `min_fraction`
    /// (and any with zero count). The largest cluster always survives.
    /// Returns the surviving column indices so callers can prune the
    /// selector and predictors to match.
    pub fn prune(&mut self, counts: &[usize], min_fraction: f64) -> Result<Vec<usize>> {
        if counts.len() != self.effective_k() {
            return Err(Error::LengthMismatch {
                what: "cluster counts",
                expected: self.effective_k(),
                got: counts.len(),
            });
        }
        if !(0.0..0.5).contains(&min_fraction) {
            return Err(Error::Config(format!("min_fraction {min_fraction} outside [0, 0.5)")));
        }
        let total: usize = counts.iter().sum();
        let mut keep: Vec<usize> = (0..counts.len())
            .filter(|&j| counts[j] > 0 && counts[j] as f64 >= min_fraction * total as f64)
            .collect();
        if keep.is_empty() {
            let mut best = 0;
            for j in 1..counts.len() {
                if counts[j] > counts[best] {
                    best = j;
                }
            }
            keep.push(best);
        }
        let ids = self.active_ids();
        for (col, &id) in ids.iter().enumerate() {
            self.active[id] = keep.contains(&col);
        }
        self.centroids = keep.iter().map(|&j| self.centroids[j].clone()).collect();
        self.counts = keep.iter().map(|&j| counts[j]).collect();
        Ok(keep)
    }

    /// Records counts (per active column) for an epoch.
    pub fn record_epoch(&mut self, epoch: usize, counts: &[usize]) {
        let mut full = vec![0; self.k_init];
        for (&id, &c) in self.active_ids().iter().zip(counts) {
            full[id] = c;
        }
        self.history.push(EpochClusterStats {
            epoch,
            effective_k: self.effective_k(),
            counts: full,
        });
    }

    /// JSON-ready summary.
    pub fn report(&self) -> serde_json::Value {
        let ids = self.active_ids();
        let clusters: Vec<serde_json::Value> = (0..self.k_init)
            .map(|id| {
                let col = ids.iter().position(|&x| x == id);
                serde_json::json!({
                    "id": id,
                    "active": self.active[id],
                    "size": col.map_or(0, |c| self.counts[c]),
                    "centroid_norm": col.map(|c| {
                        self.centroids[c].iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt()
                    }),
                })
            })
            .collect();
        serde_json::json!({
            "k_init": self.k_init,
            "effective_k": self.effective_k(),
            "clusters": clusters,
            "history": self.history,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn state(k: usize) -> ClusterState {
        ClusterState::new((0..k).map(|i| vec![i as f32, 0.0]).collect()).unwrap()
    }

    #[test]
    fn prunes_tiny_cluster() {
        let mut s = state(3);
        let keep = s.prune(&[4000, 3, 1000], 0.01).unwrap();
        assert_eq!(keep, vec![0, 2]);
        assert_eq!(s.effective_k(), 2);
        assert_eq!(s.active, vec![true, false, true]);
        assert_eq!(s.active_ids(), vec![0, 2]);
    }

    #[test]
    fn zero_fraction_prunes_only_empty() {
        let mut s = state(3);
        assert_eq!(s.prune(&[5, 0, 1], 0.0).unwrap(), vec![0, 2]);
    }

    #[test]
    fn survivor_rule() {
        let mut s = state(2);
        assert_eq!(s.prune(&[0, 0], 0.1).unwrap(), vec![0]);
        assert_eq!(s.effective_k(), 1);
    }

    #[test]
    fn hard_mean_without_momentum() {
        let mut s = state(2);
        let z = Tensor::from_rows(&[vec![1.0, 1.0], vec![3.0, 5.0], vec![9.0, 9.0]]).unwrap();
        let pi = Tensor::from_rows(&[vec![1.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        s.update_centroids(&z, &pi, 0.0).unwrap();
        assert_eq!(s.centroids, vec![vec![2.0, 3.0], vec![9.0, 9.0]]);
    }

    #[test]
    fn massless_cluster_keeps_centroid() {
        let mut s = state(2);
        let z = Tensor::from_rows(&[vec![4.0, 4.0]]).unwrap();
        let pi = Tensor::from_rows(&[vec![0.0, 1.0]]).unwrap();
        s.update_centroids(&z, &pi, 0.9).unwrap();
        assert_eq!(s.centroids[0], vec![0.0, 0.0]);
    }
}
