//! Joint training of the cluster selector and per-cluster predictors,
//! starting from more clusters than there are groups.

use hetlm::cluster::adjusted_rand_index;
use hetlm::config::RunConfig;
use hetlm::corpus::{split_train_test, PopulationSpec, Vocabulary};
use hetlm::train::{pretrain_shared, train_hetlm, ClusterModel, TrainData};

fn main() -> hetlm::Result<()> {
    let mut cfg = RunConfig::desk_scale();
    cfg.pretrain.validation_fraction = 0.0;
    cfg.train.epochs = 4;

    let pop = PopulationSpec::disjoint(3, 20, 300, 1).synthesize(2)?;
    let (train, test) = split_train_test(&pop.dataset, 0.1, 3)?;
    let vocab = Vocabulary::build(&train)?;
    let data = TrainData {
        vocab: &vocab,
        encoder: cfg.encoder,
        train: &train,
        validation: Some(&test),
    };
    let shared = pretrain_shared(&data, cfg.predictor, &cfg.pretrain, cfg.seed)?.predictor;
    let run = train_hetlm(&shared, &data, &cfg.train, cfg.seed, cfg.workers, None)?;

    println!("selector agreement with k-means after warm start: {:.3}", run.selector_agreement);
    for e in &run.epochs {
        println!(
            "epoch {}: K={} counts {:?} entropy {:.3} val nll {:.4}",
            e.epoch,
            e.effective_k,
            e.counts,
            e.train_entropy,
            e.validation_nll.unwrap_or(f64::NAN)
        );
    }
    let last = run.steps.last().unwrap();
    println!(
        "last step: L1 {:.3} L2 {:.3} L3 {:.3} overall {:.3}",
        last.losses.l1, last.losses.l2, last.losses.l3, last.losses.l_overall
    );

    let ari = adjusted_rand_index(&pop.labels_for(&train), &run.assignments(&train)?);
    let single = ClusterModel::single("single", cfg.encoder, vocab.clone(), shared);
    println!("ARI {ari:.3}");
    println!(
        "test NLL per token: single {:.4}, clusterwise {:.4}",
        single.combined_nll(&test, 1)?,
        run.model.combined_nll(&test, 1)?
    );
    Ok(())
}
