//! Pretrains one small causal predictor on every user, then decodes the
//! next session for a held-out user.

use hetlm::corpus::{decode, split_train_test, PopulationSpec, Vocabulary};
use hetlm::encoder::EncoderConfig;
use hetlm::predictor::{Example, GenerateOptions, PredictorConfig, PretrainConfig};
use hetlm::train::{pretrain_shared, TrainData};

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
    let predictor = PredictorConfig {
        max_seq_len: 128,
        ..Default::default()
    };
    let config = PretrainConfig {
        lr: 3e-3,
        batch_size: 32,
        epochs: 3,
        grad_accum: 1,
        validation_fraction: 0.1,
        ..Default::default()
    };
    let out = pretrain_shared(&data, predictor, &config, 7)?;
    for h in &out.history {
        println!("epoch {} train nll {:.4} val nll {:.4}", h.epoch, h.train_nll, h.val_nll);
    }
    println!("{} parameters", out.predictor.num_params());

    let user = &test.records[0];
    let ex = Example::from_record(user, &vocab, predictor.max_seq_len)?;
    let ids = out.predictor.generate(&ex.input, &GenerateOptions::default())?;
    println!("actual    {:?}", user.actual_session.pages);
    println!("generated {:?}", decode(&ids, &vocab));
    Ok(())
}
