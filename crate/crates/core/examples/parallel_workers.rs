//! Training results do not depend on the worker count.

use hetlm::config::RunConfig;
use hetlm::corpus::{PopulationSpec, Vocabulary};
use hetlm::train::{pretrain_shared, train_hetlm, TrainData};

fn main() -> hetlm::Result<()> {
    let mut cfg = RunConfig::desk_scale();
    cfg.pretrain.epochs = 1;
    cfg.pretrain.validation_fraction = 0.0;
    cfg.train.epochs = 1;
    cfg.train.k_init = 4;
    let pop = PopulationSpec::disjoint(3, 20, 60, 1).synthesize(2)?;
    let vocab = Vocabulary::build(&pop.dataset)?;
    let data = TrainData {
        vocab: &vocab,
        encoder: cfg.encoder,
        train: &pop.dataset,
        validation: None,
    };
    let shared = pretrain_shared(&data, cfg.predictor, &cfg.pretrain, cfg.seed)?.predictor;
    let mut finals = Vec::new();
    for workers in [1, 2, 4] {
        let t = std::time::Instant::now();
        let run = train_hetlm(&shared, &data, &cfg.train, cfg.seed, workers, None)?;
        let last = run.steps.last().unwrap().losses.l_overall;
        println!("{workers} workers: final objective {last:.9} in {:.2?}", t.elapsed());
        finals.push(last);
    }
    println!("identical across worker counts: {}", finals.windows(2).all(|w| w[0] == w[1]));
    Ok(())
}
