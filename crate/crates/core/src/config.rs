//! Run configuration: one TOML file covering every stage.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cluster::SelectorPretrainConfig;
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::eval::EvalOptions;
use crate::predictor::{PredictorConfig, PretrainConfig};
use crate::train::{FinetuneConfig, TrainConfig};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusConfig {
    pub test_fraction: f64,
    /// Sessions shorter than this are dropped.
    pub min_session_len: usize,
    /// Sessions longer than this percentile of lengths are dropped.
    pub length_percentile: f64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            test_fraction: 0.1,
            min_session_len: 2,
            length_percentile: 95.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub groups: usize,
    pub pages_per_group: usize,
    pub users_per_group: usize,
    /// Seed of the group transition structure; users are drawn from `seed`.
    pub population_seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            groups: 3,
            pages_per_group: 20,
            users_per_group: 1100,
            population_seed: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub schema_version: u32,
    pub seed: u64,
    pub workers: usize,
    pub corpus: CorpusConfig,
    pub synth: SynthConfig,
    pub encoder: EncoderConfig,
    pub predictor: PredictorConfig,
    pub pretrain: PretrainConfig,
    pub train: TrainConfig,
    pub finetune: FinetuneConfig,
    /// Number of clusters for the k-means baseline.
    pub kmeans_k: usize,
    pub eval: EvalOptions,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            schema_version: SCHEMA_VERSION,
            seed: 7,
            workers: 1,
            corpus: CorpusConfig::default(),
            synth: SynthConfig::default(),
            encoder: EncoderConfig::default(),
            predictor: PredictorConfig::default(),
            pretrain: PretrainConfig::default(),
            train: TrainConfig::default(),
            finetune: FinetuneConfig::default(),
            kmeans_k: 6,
            eval: EvalOptions::default(),
        }
    }
}

impl RunConfig {
    /// Settings that train the synthetic three-group population on one CPU
    /// in minutes: far higher learning rates and fewer pretraining epochs
    /// than the full-scale defaults.
    pub fn desk_scale() -> Self {
        let mut c = RunConfig::default();
        c.corpus.test_fraction = 300.0 / 3300.0;
        c.predictor.max_seq_len = 128;
        c.pretrain = PretrainConfig {
            lr: 3e-3,
            weight_decay: 0.01,
            batch_size: 32,
            epochs: 3,
            grad_accum: 1,
            warmup_ratio: 0.05,
            validation_fraction: 0.05,
        };
        c.train.selector_lr = 1e-2;
        c.train.predictor_lr = 1e-4;
        c.train.selector_pretrain = SelectorPretrainConfig {
            epochs: 3,
            ..Default::default()
        };
        c.finetune = FinetuneConfig {
            lr: 1e-4,
            ..Default::default()
        };
        c.kmeans_k = 3;
        c
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "unsupported schema_version {} (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        if !(self.corpus.test_fraction > 0.0 && self.corpus.test_fraction < 1.0) {
            return Err(Error::Config("corpus.test_fraction must be in (0, 1)".into()));
        }
        if self.kmeans_k == 0 {
            return Err(Error::Config("kmeans_k must be positive".into()));
        }
        self.predictor.validate()?;
        self.train.validate()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
        let c: RunConfig = toml::from_str(&text)?;
        c.validate()?;
        Ok(c)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    /// Writes the effective configuration as `config.toml` in `dir`.
    pub fn echo(&self, dir: &Path) -> Result<()> {
        let path = dir.join("config.toml");
        std::fs::write(&path, self.to_toml()?).map_err(|e| Error::file(&path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_round_trip() {
        for c in [RunConfig::default(), RunConfig::desk_scale()] {
            let text = c.to_toml().unwrap();
            let back: RunConfig = toml::from_str(&text).unwrap();
            assert_eq!(back, c);
        }
    }

    #[test]
    fn partial_file_fills_defaults() {
        let c: RunConfig = toml::from_str("schema_version = 1\nseed = 3\n[train]\nalpha = 2.0\n").unwrap();
        assert_eq!(c.seed, 3);
        assert_eq!(c.train.alpha, 2.0);
        assert_eq!(c.train.beta, 9.0);
    }

    #[test]
    fn rejects_unknown_schema() {
        let c = RunConfig {
            schema_version: 99,
            ..Default::default()
        };
        assert!(c.validate().is_err());
    }
}
