//! Frozen session encoder: bag of input pages through a fixed random projection.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{SessionDataset, UserRecord, Vocabulary};
use crate::error::{Error, Result};
use crate::tensor::{load_checkpoint, save_checkpoint, ParamSet, SeededRng, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub embedding_dim: usize,
    pub projection_seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            embedding_dim: 64,
            projection_seed: 17,
        }
    }
}

/// Any frozen map from a user's history to a fixed-size vector.
pub trait Encoder {
    fn dim(&self) -> usize;

    fn embed(&self, record: &UserRecord) -> Vec<f32>;

    /// Identifies the encoder for embedding caches.
    fn cache_key(&self) -> String;

    /// `[records, dim]` embedding matrix.
    fn embed_all(&self, dataset: &SessionDataset) -> Result<Tensor> {
        if dataset.is_empty() {
            return Err(Error::EmptyDataset("encoding"));
        }
        let mut data = Vec::with_capacity(dataset.len() * self.dim());
        for r in &dataset.records {
            data.extend(self.embed(r));
        }
        Tensor::new(vec![dataset.len(), self.dim()], data)
    }
}

pub struct BagOfPagesEncoder {
    config: EncoderConfig,
    vocab: Vocabulary,
    /// `[vocab size, dim]`, entries N(0, 1) / sqrt(dim).
    projection: Vec<f64>,
}

impl BagOfPagesEncoder {
    pub fn new(config: EncoderConfig, vocab: &Vocabulary) -> Result<Self> {
        let dim = config.embedding_dim;
        if dim == 0 {
            return Err(Error::Config("embedding_dim must be positive".into()));
        }
        let scale = 1.0 / (dim as f64).sqrt();
        let root = SeededRng::new(config.projection_seed).split_named("projection");
        let mut projection = Vec::with_capacity(vocab.size() * dim);
        for id in 0..vocab.size() {
            let mut rng = root.split(id as u64);
            projection.extend((0..dim).map(|_| rng.normal() * scale));
        }
        Ok(BagOfPagesEncoder {
            config,
            vocab: vocab.clone(),
            projection,
        })
    }

    pub fn config(&self) -> EncoderConfig {
        self.config
    }

    /// Page-count vector over the vocabulary (specials and unknown pages excluded).
    pub fn frequencies(&self, record: &UserRecord) -> Vec<f64> {
        let mut f = vec![0.0; self.vocab.size()];
        for p in record.input_pages() {
            if let Some(id) = self.vocab.get(p) {
                f[id] += 1.0;
            }
        }
        f
    }

    /// Projects and L2-normalizes any frequency vector; zero stays zero.
    pub fn project(&self, freq: &[f64]) -> Vec<f32> {
        let z = self.project_raw(freq);
        let norm = z.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            z.iter().map(|v| (v / norm) as f32).collect()
        } else {
            vec![0.0; z.len()]
        }
    }

    /// The raw (unnormalized) projection of a frequency vector.
    pub fn project_raw(&self, freq: &[f64]) -> Vec<f64> {
        let dim = self.config.embedding_dim;
        let mut z = vec![0.0f64; dim];
        for (id, &c) in freq.iter().enumerate().filter(|(_, &c)| c != 0.0) {
            for (zj, pj) in z.iter_mut().zip(&self.projection[id * dim..(id + 1) * dim]) {
                *zj += c * pj;
            }
        }
        z
    }
}

impl Encoder for BagOfPagesEncoder {
    fn dim(&self) -> usize {
        self.config.embedding_dim
    }

    fn embed(&self, record: &UserRecord) -> Vec<f32> {
        self.project(&self.frequencies(record))
    }

    fn cache_key(&self) -> String {
        format!(
            "bag-of-pages/dim={}/seed={}/vocab={}",
            self.config.embedding_dim,
            self.config.projection_seed,
            self.vocab.size()
        )
    }
}

/// Loads embeddings from `dir` when the cache key and dataset hash match,
/// otherwise computes and stores them.
pub fn cached_embeddings(dir: &Path, encoder: &dyn Encoder, dataset: &SessionDataset) -> Result<Tensor> {
    let key = encoder.cache_key();
    let hash = dataset.content_hash();
    if dir.join("manifest.json").exists() {
        let (params, manifest) = load_checkpoint(dir)?;
        if manifest.metadata["encoder"] == key.as_str() && manifest.metadata["dataset_hash"] == hash.as_str() {
            return params.get("embeddings").cloned();
        }
    }
    let z = encoder.embed_all(dataset)?;
    let mut p = ParamSet::new();
    p.insert("embeddings", z.clone());
    save_checkpoint(dir, &p, serde_json::json!({"encoder": key, "dataset_hash": hash}))?;
    Ok(z)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Session;

    fn rec(pages: &[&str]) -> UserRecord {
        UserRecord::from_sessions(
            "u",
            vec![
                Session::new(pages.iter().map(|p| p.to_string()).collect(), 0),
                Session::new(vec!["A".into()], 1),
            ],
        )
        .unwrap()
    }

    fn enc() -> BagOfPagesEncoder {
        let v = Vocabulary::from_pages(["A", "B", "C", "D"]).unwrap();
        BagOfPagesEncoder::new(EncoderConfig::default(), &v).unwrap()
    }

    fn norm(z: &[f32]) -> f64 {
        z.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt()
    }

    #[test]
    fn unknown_only_history_embeds_to_zero() {
        let z = enc().embed(&rec(&["Q", "R"]));
        assert!(z.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn order_does_not_matter() {
        let e = enc();
        assert_eq!(e.embed(&rec(&["A", "B", "B"])), e.embed(&rec(&["B", "A", "B"])));
    }

    #[test]
    fn unit_norm() {
        let z = enc().embed(&rec(&["A", "C", "D"]));
        assert!((norm(&z) - 1.0).abs() < 1e-6);
    }

    #[test]
    fn target_session_is_ignored() {
        let e = enc();
        let mut r = rec(&["A", "B"]);
        let before = e.embed(&r);
        r.actual_session.pages = vec!["D".into(), "D".into()];
        assert_eq!(before, e.embed(&r));
    }

    #[test]
    fn projection_is_reproducible() {
        let a = enc();
        let b = enc();
        assert_eq!(a.projection, b.projection);
    }

    #[test]
    fn cache_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let e = enc();
        let d = SessionDataset::new(vec![rec(&["A"]), rec(&["B", "C"])], crate::corpus::SplitTag::All);
        let z1 = cached_embeddings(dir.path(), &e, &d).unwrap();
        let z2 = cached_embeddings(dir.path(), &e, &d).unwrap();
        assert_eq!(z1, z2);
        assert_eq!(z1, e.embed_all(&d).unwrap());
    }
}
