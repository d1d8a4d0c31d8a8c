//! Page-generation, outcome and variance metrics for two models, and the
//! composite win rate of one over the other.

use hetlm::corpus::{split_train_test, PopulationSpec, Vocabulary};
use hetlm::encoder::EncoderConfig;
use hetlm::eval::{composite, evaluate, EvalOptions, WinRule};
use hetlm::predictor::{PredictorConfig, PretrainConfig};
use hetlm::train::{kmeans_baseline, pretrain_shared, ClusterModel, FinetuneConfig, TrainData};

fn main() -> hetlm::Result<()> {
    let pop = PopulationSpec::disjoint(3, 20, 150, 1).synthesize(2)?;
    let (train, test) = split_train_test(&pop.dataset, 0.15, 3)?;
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
    let ft = FinetuneConfig { lr: 1e-4, epochs: 2, ..Default::default() };
    let clustered = kmeans_baseline(&shared, &data, 3, &ft, 7, 1)?.model;

    let opts = EvalOptions::default();
    let a = evaluate(&single, &test, &opts)?;
    let b = evaluate(&clustered, &test, &opts)?;
    for r in [&a, &b] {
        let m = &r.combined;
        println!(
            "{:>10}: HR {:.3} IoU {:.3} Val-P {:.3} F1 {:.3} BLEU {:.3} ppl {:.2}",
            r.model, m.page_gen.hr, m.page_gen.iou, m.page_gen.val_p, m.outcome.f1_either, m.bleu, r.perplexity
        );
    }
    for row in &b.clusters {
        println!("  cluster {} ({} users): IoA {:.3}", row.cluster, row.metrics.n, row.metrics.page_gen.ioa);
    }

    let scores = composite(&b.combined.as_map(), &a.combined.as_map(), WinRule::Strict)?;
    println!(
        "k-means vs single: outcome {:.2} page-gen {:.2} variance {:.2} overall {:.2}",
        scores.outcome_composite, scores.pagegen_mean_composite, scores.pagegen_var_composite, scores.overall_composite
    );
    Ok(())
}
