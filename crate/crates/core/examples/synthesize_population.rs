//! Generates a three-group browsing population, splits it by user and
//! writes JSONL files plus the page vocabulary.
//!
//!     cargo run --example synthesize_population -- /tmp/pop

use std::path::PathBuf;

use hetlm::corpus::{split_train_test, tokenize, PopulationSpec, Vocabulary};

fn main() -> hetlm::Result<()> {
    let out = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(std::env::temp_dir);
    std::fs::create_dir_all(&out)?;

    let spec = PopulationSpec::disjoint(3, 20, 200, 1);
    let pop = spec.synthesize(2)?;
    let (train, test) = split_train_test(&pop.dataset, 0.1, 3)?;
    let vocab = Vocabulary::build(&train)?;

    train.save_jsonl(&out.join("train.jsonl"))?;
    test.save_jsonl(&out.join("test.jsonl"))?;
    vocab.save(&out.join("vocab.json"))?;

    println!("{} train / {} test users, vocabulary of {}", train.len(), test.len(), vocab.size());
    println!("test pages unknown to the vocabulary: {:.3}", test.unk_rate(&vocab));

    let first = &train.records[0];
    let (input, target) = tokenize(first, &vocab, 128);
    println!(
        "user {} (group {}): {} input tokens, {} target tokens",
        first.user_id, pop.groups[&first.user_id], input.len(), target.len()
    );
    println!("last session: {:?}", first.actual_session.pages);
    println!("wrote {}", out.display());
    Ok(())
}
