use serde::{Deserialize, Serialize};

use super::{Example, Predictor};
use crate::error::{Error, Result};
use crate::tensor::{warmup_lr, AdamW, AdamWConfig, Gradients, SeededRng};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub grad_accum: usize,
    pub warmup_ratio: f64,
    pub validation_fraction: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            lr: 1e-5,
            weight_decay: 0.01,
            batch_size: 32,
            epochs: 100,
            grad_accum: 4,
            warmup_ratio: 0.05,
            validation_fraction: 0.05,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    /// Per-token NLL averaged over the epoch's batches (pre-update values).
    pub train_nll: f64,
    /// Per-token NLL on the validation set after the epoch; NaN without one.
    pub val_nll: f64,
}

#[derive(Debug, Clone)]
pub struct PretrainOutcome {
    pub predictor: Predictor,
    pub history: Vec<EpochStats>,
    /// Set when a non-finite loss stopped training; `predictor` then holds
    /// the last finite parameters.
    pub diverged: Option<(usize, usize)>,
}

/// Trains `init` on `train` with AdamW, linear warmup then constant rate,
/// and gradient accumulation. Batch loss is the mean of per-sequence
/// summed NLL.
pub fn pretrain(
    init: Predictor,
    train: &[Example],
    val: &[Example],
    config: &PretrainConfig,
    seed: u64,
) -> Result<PretrainOutcome> {
    if train.is_empty() {
        return Err(Error::EmptyDataset("pretraining"));
    }
    if config.batch_size == 0 || config.grad_accum == 0 {
        return Err(Error::Config("batch_size and grad_accum must be positive".into()));
    }
    let mut model = init;
    let mut opt = AdamW::new(AdamWConfig {
        lr: config.lr,
        weight_decay: config.weight_decay,
        ..Default::default()
    });
    let micro_per_epoch = train.len().div_ceil(config.batch_size);
    let steps_per_epoch = micro_per_epoch.div_ceil(config.grad_accum);
    let total_steps = steps_per_epoch * config.epochs;
    let warmup = (config.warmup_ratio * total_steps as f64).ceil() as usize;
    let root = SeededRng::new(seed).split_named("pretrain");

    let mut history = Vec::with_capacity(config.epochs);
    let mut step = 0;
    for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        root.split(epoch as u64).shuffle(&mut order);
        let (mut nll_sum, mut tok_sum) = (0.0f64, 0usize);
        let micro: Vec<&[usize]> = order.chunks(config.batch_size).collect();
        for group in micro.chunks(config.grad_accum) {
            let mut acc = Gradients::default();
            for idx in group {
                let batch: Vec<&Example> = idx.iter().map(|&i| &train[i]).collect();
                let (per_seq, grads) = model.loss_and_grads(&batch)?;
                nll_sum += per_seq.iter().map(|&v| v as f64).sum::<f64>();
                tok_sum += batch.iter().map(|e| e.target.len()).sum::<usize>();
                if !per_seq.iter().all(|v| v.is_finite()) || !grads.all_finite() {
                    return Ok(PretrainOutcome {
                        predictor: model,
                        history,
                        diverged: Some((epoch, step)),
                    });
                }
                acc.accumulate(&grads);
            }
            acc.scale(1.0 / group.len() as f32);
            let before = model.params.clone();
            opt.step_with_lr(&mut model.params, &acc, warmup_lr(config.lr, step, warmup))?;
            if !model.params.all_finite() {
                model.params = before;
                return Ok(PretrainOutcome {
                    predictor: model,
                    history,
                    diverged: Some((epoch, step)),
                });
            }
            step += 1;
        }
        let val_nll = if val.is_empty() {
            f64::NAN
        } else {
            let (t, n) = model.total_nll(val, config.batch_size)?;
            t / n as f64
        };
        history.push(EpochStats {
            epoch,
            train_nll: nll_sum / tok_sum as f64,
            val_nll,
        });
    }
    Ok(PretrainOutcome {
        predictor: model,
        history,
        diverged: None,
    })
}

/// Writes `epoch,train_nll,val_nll` rows.
pub fn write_curves<W: std::io::Write>(history: &[EpochStats], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for h in history {
        out.serialize(h)?;
    }
    out.flush()?;
    Ok(())
}
