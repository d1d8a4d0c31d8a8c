//! Clusterwise training: selector (actor) and per-cluster predictors
//! (critics), plus the single-model and k-means baselines.

mod baseline;
mod losses;
mod model;

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cluster::{kmeans, pretrain_selector, ClusterState, KMeansResult, Selector, SelectorConfig, SelectorPretrainConfig};
use crate::corpus::{SessionDataset, Vocabulary};
use crate::encoder::{BagOfPagesEncoder, Encoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::parallel::par_map;
use crate::predictor::{Example, Predictor};
use crate::tensor::{AdamW, AdamWConfig, Graph, SeededRng, Tensor};

pub use baseline::{
    finetune, kmeans_baseline, pretrain_shared, validation_split, FinetuneConfig, FinetuneOutcome, KMeansBaseline,
};
pub use losses::{
    critic_losses, evaluate_objective, hard_assign, loss_l1, loss_l2, loss_l3, loss_overall, selector_objective,
    LossBreakdown, ObjectiveNodes, MIN_CENTROID_MASS,
};
pub use model::{ClusterModel, Routing};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Weight of the assignment-entropy term.
    pub alpha: f64,
    /// Weight of the centroid-separation term.
    pub beta: f64,
    pub k_init: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub selector_lr: f64,
    pub predictor_lr: f64,
    pub selector_weight_decay: f64,
    pub predictor_weight_decay: f64,
    /// Clusters holding less than this share of training users are pruned
    /// at the end of each epoch.
    pub min_fraction: f64,
    pub centroid_momentum: f64,
    pub kmeans_max_iters: usize,
    pub selector: SelectorConfig,
    pub selector_pretrain: SelectorPretrainConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            alpha: 5.0,
            beta: 9.0,
            k_init: 6,
            epochs: 10,
            batch_size: 16,
            selector_lr: 5e-5,
            predictor_lr: 1e-5,
            selector_weight_decay: 1e-4,
            predictor_weight_decay: 0.01,
            min_fraction: 0.01,
            centroid_momentum: 0.9,
            kmeans_max_iters: 100,
            selector: SelectorConfig::default(),
            selector_pretrain: SelectorPretrainConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.alpha >= 0.0 && self.beta >= 0.0) {
            return bad(format!("alpha and beta must be non-negative, got {} and {}", self.alpha, self.beta));
        }
        if self.k_init == 0 || self.batch_size == 0 {
            return bad("k_init and batch_size must be positive".into());
        }
        if !(0.0..0.5).contains(&self.min_fraction) {
            return bad(format!("min_fraction {} outside [0, 0.5)", self.min_fraction));
        }
        if !(0.0..=1.0).contains(&self.centroid_momentum) {
            return bad(format!("centroid_momentum {} outside [0, 1]", self.centroid_momentum));
        }
        Ok(())
    }
}

/// One row of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub epoch: usize,
    pub step: usize,
    #[serde(flatten)]
    pub losses: LossBreakdown,
    pub effective_k: usize,
    /// Hard-assignment counts in the batch, per active cluster.
    pub counts: Vec<usize>,
    /// Mean critic loss over the clusters that received samples.
    pub critic_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub effective_k: usize,
    /// Hard counts over the training set per active cluster, after pruning.
    pub counts: Vec<usize>,
    /// Mean selector entropy over the training set.
    pub train_entropy: f64,
    /// Objective on the validation set; `None` without one.
    pub validation: Option<LossBreakdown>,
    /// Routed per-token NLL on the validation set.
    pub validation_nll: Option<f64>,
}

/// Everything a HeTLM run produces.
#[derive(Debug, Clone)]
pub struct HetlmRun {
    pub model: ClusterModel,
    pub state: ClusterState,
    pub kmeans: KMeansResult,
    /// Agreement of the pretrained selector with the k-means labels.
    pub selector_agreement: f64,
    pub steps: Vec<StepLog>,
    pub epochs: Vec<EpochLog>,
}

impl HetlmRun {
    /// Final hard assignment of each training user, as initial cluster ids.
    pub fn assignments(&self, train: &SessionDataset) -> Result<Vec<usize>> {
        let ids = self.state.active_ids();
        Ok(self.model.route(train)?.into_iter().map(|c| ids[c]).collect())
    }
}

/// Shuffled visiting order for an epoch, shared with plain finetuning so the
/// single-cluster case sees identical batches.
pub fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    SeededRng::new(seed)
        .split_named("epoch-order")
        .split(epoch as u64)
        .shuffle(&mut order);
    order
}

fn gather_rows(z: &Tensor, idx: &[usize]) -> Result<Tensor> {
    let mut data = Vec::with_capacity(idx.len() * z.cols());
    for &i in idx {
        data.extend_from_slice(z.row(i));
    }
    Tensor::new(vec![idx.len(), z.cols()], data)
}

/// `[n, K]` matrix of summed NLL of every example under every predictor.
fn nll_matrix(predictors: &[Predictor], examples: &[&Example], workers: usize) -> Result<Tensor> {
    let k = predictors.len();
    let cols = par_map(predictors, workers, |p| {
        let mut v = Vec::with_capacity(examples.len());
        for chunk in examples.chunks(32) {
            v.extend(p.nll_batch(chunk)?);
        }
        Ok::<_, Error>(v)
    });
    let mut data = vec![0.0f32; examples.len() * k];
    for (j, col) in cols.into_iter().enumerate() {
        for (i, v) in col?.into_iter().enumerate() {
            data[i * k + j] = v;
        }
    }
    Tensor::new(vec![examples.len(), k], data)
}

/// Inputs shared by HeTLM and the baselines.
pub struct TrainData<'a> {
    pub vocab: &'a Vocabulary,
    pub encoder: EncoderConfig,
    pub train: &'a SessionDataset,
    pub validation: Option<&'a SessionDataset>,
}

impl TrainData<'_> {
    fn examples(&self, ds: &SessionDataset, max_seq_len: usize) -> Result<Vec<Example>> {
        ds.records
            .iter()
            .map(|r| Example::from_record(r, self.vocab, max_seq_len))
            .collect()
    }
}

/// Trains selector and predictors jointly, starting every predictor from
/// `shared`. If `checkpoints` is set, the model is saved there after each
/// epoch as `epoch_{e}`.
pub fn train_hetlm(
    shared: &Predictor,
    data: &TrainData,
    config: &TrainConfig,
    seed: u64,
    workers: usize,
    checkpoints: Option<&Path>,
) -> Result<HetlmRun> {
    config.validate()?;
    if data.train.is_empty() {
        return Err(Error::EmptyDataset("hetlm training"));
    }
    let root = SeededRng::new(seed);
    let encoder = BagOfPagesEncoder::new(data.encoder, data.vocab)?;
    let z = encoder.embed_all(data.train)?;
    let examples = data.examples(data.train, shared.config.max_seq_len)?;

    let km = kmeans(&z, config.k_init, seed, config.kmeans_max_iters, 1e-9)?;
    let mut state = ClusterState::from_kmeans(&km)?;
    let mut selector = Selector::new(encoder.dim(), config.k_init, config.selector, &root.split_named("selector"))?;
    let agreement = pretrain_selector(&mut selector, &z, &km.labels, &config.selector_pretrain, seed)?;

    let mut predictors: Vec<Predictor> = vec![shared.clone(); config.k_init];
    let pred_cfg = AdamWConfig {
        lr: config.predictor_lr,
        weight_decay: config.predictor_weight_decay,
        ..Default::default()
    };
    let mut pred_opts: Vec<AdamW> = (0..config.k_init).map(|_| AdamW::new(pred_cfg)).collect();
    let mut sel_opt = AdamW::new(AdamWConfig {
        lr: config.selector_lr,
        weight_decay: config.selector_weight_decay,
        ..Default::default()
    });

    let val = match data.validation {
        Some(v) if !v.is_empty() => Some((encoder.embed_all(v)?, data.examples(v, shared.config.max_seq_len)?)),
        _ => None,
    };

    let mut steps = Vec::new();
    let mut epochs = Vec::new();
    let mut step = 0usize;
    for epoch in 0..config.epochs {
        let order = epoch_order(seed, epoch, examples.len());
        for batch in order.chunks(config.batch_size) {
            let log = train_step(
                &mut selector,
                &mut sel_opt,
                &mut predictors,
                &mut pred_opts,
                &mut state,
                &z,
                &examples,
                batch,
                config,
                workers,
            )
            .map_err(|e| match e {
                Error::NonFinite(_) => Error::Diverged { epoch, step },
                other => other,
            })?;
            steps.push(StepLog { epoch, step, ..log });
            step += 1;
        }

        let pi = selector.probs(&z)?;
        let train_entropy = (0..pi.rows())
            .map(|i| loss_l2(&pi.row(i).iter().map(|&v| v as f64).collect::<Vec<_>>()))
            .sum::<f64>()
            / pi.rows() as f64;
        let counts = ClusterState::hard_counts(&pi);
        let keep = state.prune(&counts, config.min_fraction)?;
        if keep.len() < selector.k() {
            let hidden = config.selector.hidden;
            let k_old = selector.k();
            sel_opt.select_columns("w2", &[hidden, k_old], &keep)?;
            sel_opt.select_columns("b2", &[k_old], &keep)?;
            selector.select_clusters(&keep)?;
            predictors = keep.iter().map(|&j| predictors[j].clone()).collect();
            let mut old: Vec<Option<AdamW>> = pred_opts.into_iter().map(Some).collect();
            pred_opts = keep.iter().map(|&j| old[j].take().expect("unique column")).collect();
        }
        let kept_counts: Vec<usize> = keep.iter().map(|&j| counts[j]).collect();
        state.record_epoch(epoch, &kept_counts);

        let (validation, validation_nll) = match &val {
            Some((zv, ev)) => {
                let refs: Vec<&Example> = ev.iter().collect();
                let nll = nll_matrix(&predictors, &refs, workers)?;
                let (bd, pi_v) = evaluate_objective(
                    &selector.params,
                    zv,
                    &nll,
                    &state.centroids,
                    config.alpha,
                    config.beta,
                )?;
                let tokens: usize = ev.iter().map(|e| e.target.len()).sum();
                let routed: f64 = pi_v
                    .iter()
                    .enumerate()
                    .map(|(i, p)| nll.row(i)[losses::argmax_f64(p)] as f64)
                    .sum();
                (Some(bd), Some(routed / tokens as f64))
            }
            None => (None, None),
        };
        epochs.push(EpochLog {
            epoch,
            effective_k: state.effective_k(),
            counts: kept_counts,
            train_entropy,
            validation,
            validation_nll,
        });
        if let Some(dir) = checkpoints {
            model(&selector, &predictors, data).save(&dir.join(format!("epoch_{epoch}")))?;
        }
    }

    Ok(HetlmRun {
        model: model(&selector, &predictors, data),
        state,
        kmeans: km,
        selector_agreement: agreement,
        steps,
        epochs,
    })
}

fn model(selector: &Selector, predictors: &[Predictor], data: &TrainData) -> ClusterModel {
    ClusterModel {
        name: "hetlm".into(),
        encoder: data.encoder,
        vocab: data.vocab.clone(),
        routing: Routing::Selector(selector.clone()),
        predictors: predictors.to_vec(),
    }
}

/// One optimisation step on a batch of example indices:
/// route with the current selector, update each predictor on the samples
/// hard-assigned to it, then update the selector on `L_O` with the
/// refreshed per-cluster nlls held fixed, and finally move the centroids.
#[allow(clippy::too_many_arguments)]
fn train_step(
    selector: &mut Selector,
    sel_opt: &mut AdamW,
    predictors: &mut [Predictor],
    pred_opts: &mut [AdamW],
    state: &mut ClusterState,
    z: &Tensor,
    examples: &[Example],
    batch: &[usize],
    config: &TrainConfig,
    workers: usize,
) -> Result<StepLog> {
    let k = predictors.len();
    let zb = gather_rows(z, batch)?;
    let pi = selector.probs(&zb)?;
    let assigned = hard_assign(&pi);
    let mut counts = vec![0usize; k];
    for &a in &assigned {
        counts[a] += 1;
    }

    // Critic updates, one independent job per cluster with samples.
    let jobs: Vec<(usize, Predictor, AdamW)> = (0..k)
        .filter(|&j| counts[j] > 0)
        .map(|j| (j, predictors[j].clone(), pred_opts[j].clone()))
        .collect();
    let results = par_map(&jobs, workers, |(j, p, opt)| {
        let mine: Vec<&Example> = batch
            .iter()
            .zip(&assigned)
            .filter(|(_, &a)| a == *j)
            .map(|(&i, _)| &examples[i])
            .collect();
        let (per_seq, grads) = p.loss_and_grads(&mine)?;
        if !per_seq.iter().all(|v| v.is_finite()) || !grads.all_finite() {
            return Err(Error::NonFinite(format!("critic {j} loss")));
        }
        let mut p = p.clone();
        let mut opt = opt.clone();
        opt.step(&mut p.params, &grads)?;
        let mean = per_seq.iter().map(|&v| v as f64).sum::<f64>() / per_seq.len() as f64;
        Ok((*j, p, opt, mean))
    });
    let mut critic_sum = 0.0;
    let mut critic_n = 0usize;
    for r in results {
        let (j, p, opt, mean) = r?;
        predictors[j] = p;
        pred_opts[j] = opt;
        critic_sum += mean;
        critic_n += 1;
    }

    // Actor update against the refreshed critics.
    let refs: Vec<&Example> = batch.iter().map(|&i| &examples[i]).collect();
    let nll = nll_matrix(predictors, &refs, workers)?;
    if !nll.all_finite() {
        return Err(Error::NonFinite("per-cluster nll".into()));
    }
    let mut g = Graph::<f32>::new();
    let binds = selector.params.bind(&mut g);
    let nodes = selector_objective(&mut g, &binds, &zb, &nll, &state.centroids, config.alpha, config.beta)?;
    let grads = g.backward(nodes.l_overall)?;
    if !grads.all_finite() {
        return Err(Error::NonFinite("selector gradient".into()));
    }
    let pi_now = g.value(nodes.pi).clone();
    let losses = {
        let pi_rows: Vec<Vec<f64>> = (0..pi_now.rows())
            .map(|i| pi_now.row(i).iter().map(|&v| v as f64).collect())
            .collect();
        let mut l1 = 0.0;
        let mut l2 = 0.0;
        for (i, p) in pi_rows.iter().enumerate() {
            let row: Vec<f64> = nll.row(i).iter().map(|&v| v as f64).collect();
            l1 += loss_l1(p, &row)?;
            l2 += loss_l2(p);
        }
        let n = pi_rows.len() as f64;
        LossBreakdown::new(l1 / n, l2 / n, loss_l3(&nodes.centroids), config.alpha, config.beta)
    };
    sel_opt.step(&mut selector.params, &grads)?;
    state.update_centroids(&zb, &pi_now, config.centroid_momentum)?;

    Ok(StepLog {
        epoch: 0,
        step: 0,
        losses,
        effective_k: k,
        counts,
        critic_loss: if critic_n == 0 { 0.0 } else { critic_sum / critic_n as f64 },
    })
}

/// Writes the step log as CSV; counts are `;`-joined.
pub fn write_step_log<W: Write>(steps: &[StepLog], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["epoch", "step", "l1", "l2", "l3", "l_overall", "effective_k", "counts", "critic_loss"])?;
    for s in steps {
        let counts: Vec<String> = s.counts.iter().map(usize::to_string).collect();
        out.write_record([
            s.epoch.to_string(),
            s.step.to_string(),
            s.losses.l1.to_string(),
            s.losses.l2.to_string(),
            s.losses.l3.to_string(),
            s.losses.l_overall.to_string(),
            s.effective_k.to_string(),
            counts.join(";"),
            s.critic_loss.to_string(),
        ])?;
    }
    out.flush()?;
    Ok(())
}

/// Writes per-epoch validation curves as CSV (empty cells without validation data).
pub fn write_epoch_log<W: Write>(epochs: &[EpochLog], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record([
        "epoch",
        "effective_k",
        "train_entropy",
        "val_l1",
        "val_l2",
        "val_l3",
        "val_l_overall",
        "val_nll",
    ])?;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for e in epochs {
        let v = e.validation;
        out.write_record([
            e.epoch.to_string(),
            e.effective_k.to_string(),
            e.train_entropy.to_string(),
            opt(v.map(|b| b.l1)),
            opt(v.map(|b| b.l2)),
            opt(v.map(|b| b.l3)),
            opt(v.map(|b| b.l_overall)),
            opt(e.validation_nll),
        ])?;
    }
    out.flush()?;
    Ok(())
}
