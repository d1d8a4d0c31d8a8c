use serde::{Deserialize, Serialize};

use super::{epoch_order, ClusterModel, Routing, TrainData};
use crate::cluster::{kmeans, KMeansResult};
use crate::corpus::{split_train_test, SessionDataset};
use crate::encoder::{BagOfPagesEncoder, Encoder};
use crate::error::{Error, Result};
use crate::parallel::par_map;
use crate::predictor::{pretrain, Example, Predictor, PredictorConfig, PretrainConfig, PretrainOutcome};
use crate::tensor::{AdamW, AdamWConfig, SeededRng};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FinetuneConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            lr: 1e-5,
            weight_decay: 0.01,
            batch_size: 16,
            epochs: 10,
        }
    }
}

#[derive(Debug, Clone)]
pub struct FinetuneOutcome {
    pub predictor: Predictor,
    /// Mean per-sequence NLL of each batch before its update.
    pub step_losses: Vec<f64>,
}

/// Plain AdamW finetuning at a constant rate, visiting batches in
/// [`epoch_order`].
pub fn finetune(init: &Predictor, examples: &[Example], config: &FinetuneConfig, seed: u64) -> Result<FinetuneOutcome> {
    if examples.is_empty() {
        return Err(Error::EmptyDataset("finetuning"));
    }
    if config.batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    let mut model = init.clone();
    let mut opt = AdamW::new(AdamWConfig {
        lr: config.lr,
        weight_decay: config.weight_decay,
        ..Default::default()
    });
    let mut step_losses = Vec::new();
    for epoch in 0..config.epochs {
        for batch in epoch_order(seed, epoch, examples.len()).chunks(config.batch_size) {
            let refs: Vec<&Example> = batch.iter().map(|&i| &examples[i]).collect();
            let (per_seq, grads) = model.loss_and_grads(&refs)?;
            if !grads.all_finite() {
                return Err(Error::Diverged {
                    epoch,
                    step: step_losses.len(),
                });
            }
            step_losses.push(per_seq.iter().map(|&v| v as f64).sum::<f64>() / per_seq.len() as f64);
            opt.step(&mut model.params, &grads)?;
        }
    }
    Ok(FinetuneOutcome {
        predictor: model,
        step_losses,
    })
}

/// Pretrains one predictor on all training users, holding out
/// `validation_fraction` of them for the validation curve.
pub fn pretrain_shared(
    data: &TrainData,
    predictor: PredictorConfig,
    config: &PretrainConfig,
    seed: u64,
) -> Result<PretrainOutcome> {
    let init = Predictor::new(predictor, data.vocab.size(), &SeededRng::new(seed).split_named("predictor-init"))?;
    let (train, val) = validation_split(data.train, config.validation_fraction, seed)?;
    let val = match val {
        Some(v) => data.examples(&v, predictor.max_seq_len)?,
        None => Vec::new(),
    };
    pretrain(init, &data.examples(&train, predictor.max_seq_len)?, &val, config, seed)
}

/// Holds out `fraction` of the users for validation curves. Returns the
/// dataset unchanged when the fraction rounds to no users.
pub fn validation_split(
    dataset: &SessionDataset,
    fraction: f64,
    seed: u64,
) -> Result<(SessionDataset, Option<SessionDataset>)> {
    let held_out = (fraction * dataset.len() as f64).round() as usize;
    if fraction > 0.0 && held_out >= 1 && held_out < dataset.len() {
        let (t, v) = split_train_test(dataset, fraction, seed ^ 0x5eed)?;
        Ok((t, Some(v)))
    } else {
        Ok((dataset.clone(), None))
    }
}

#[derive(Debug, Clone)]
pub struct KMeansBaseline {
    pub model: ClusterModel,
    pub kmeans: KMeansResult,
    pub step_losses: Vec<Vec<f64>>,
}

/// Fixed k-means partition of the training users, then one finetuned copy
/// of `shared` per cluster. Users are routed to the nearest centroid.
pub fn kmeans_baseline(
    shared: &Predictor,
    data: &TrainData,
    k: usize,
    config: &FinetuneConfig,
    seed: u64,
    workers: usize,
) -> Result<KMeansBaseline> {
    let encoder = BagOfPagesEncoder::new(data.encoder, data.vocab)?;
    let z = encoder.embed_all(data.train)?;
    let km = kmeans(&z, k, seed, 100, 1e-9)?;
    let examples = data.examples(data.train, shared.config.max_seq_len)?;
    let clusters: Vec<usize> = (0..k).collect();
    let outcomes = par_map(&clusters, workers, |&c| {
        let mine: Vec<Example> = examples
            .iter()
            .zip(&km.labels)
            .filter(|(_, &l)| l == c)
            .map(|(e, _)| e.clone())
            .collect();
        finetune(shared, &mine, config, seed.wrapping_add(c as u64))
    });
    let mut predictors = Vec::with_capacity(k);
    let mut step_losses = Vec::with_capacity(k);
    for o in outcomes {
        let o = o?;
        predictors.push(o.predictor);
        step_losses.push(o.step_losses);
    }
    Ok(KMeansBaseline {
        model: ClusterModel {
            name: format!("kmeans-{k}"),
            encoder: data.encoder,
            vocab: data.vocab.clone(),
            routing: Routing::Centroids(km.centroids.clone()),
            predictors,
        },
        kmeans: km,
        step_losses,
    })
}
