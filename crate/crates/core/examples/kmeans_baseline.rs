//! Exogenous clustering: k-means on session embeddings, then one finetuned
//! copy of the pretrained predictor per cluster.

use hetlm::cluster::adjusted_rand_index;
use hetlm::corpus::{split_train_test, PopulationSpec, Vocabulary};
use hetlm::encoder::EncoderConfig;
use hetlm::predictor::{PredictorConfig, PretrainConfig};
use hetlm::train::{kmeans_baseline, pretrain_shared, ClusterModel, FinetuneConfig, TrainData};

fn main() -> hetlm::Result<()> {
    let pop = PopulationSpec::disjoint(3, 20, 150, 1).synthesize(2)?;
    let (train, test) = split_train_test(&pop.dataset, 0.1, 3)?;
    let vocab = Vocabulary::build(&train)?;
    let data = TrainData {
        vocab: &vocab,
        encoder: EncoderConfig::default(),
        train: &train,
        validation: None,
    };
    let pcfg = PretrainConfig {
        lr: 3e-3,
        batch_size: 32,
        epochs: 2,
        grad_accum: 1,
        validation_fraction: 0.0,
        ..Default::default()
    };
    let shared = pretrain_shared(&data, PredictorConfig { max_seq_len: 128, ..Default::default() }, &pcfg, 7)?.predictor;
    let single = ClusterModel::single("single", data.encoder, vocab.clone(), shared.clone());

    let ft = FinetuneConfig {
        lr: 1e-4,
        epochs: 3,
        ..Default::default()
    };
    let base = kmeans_baseline(&shared, &data, 3, &ft, 7, 1)?;
    let truth = pop.labels_for(&train);
    println!("cluster sizes {:?}", base.kmeans.counts());
    println!("ARI against hidden groups {:.3}", adjusted_rand_index(&truth, &base.kmeans.labels));
    println!(
        "test NLL per token: single {:.4}, per-cluster {:.4}",
        single.combined_nll(&test, 1)?,
        base.model.combined_nll(&test, 1)?
    );
    Ok(())
}
