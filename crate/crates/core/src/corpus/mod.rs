//! Browsing logs: parsing, filtering, page-level vocabulary, tokenization and
//! a synthetic population generator.

mod parse;
mod synth;
mod vocab;

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::SeededRng;

pub use parse::{filter_sessions, parse_log, percentile, FilterSummary, LogFormat, ParsedLog, RowError};
pub use synth::{GroupSpec, PopulationSpec, SynthOutput, CART, PURCHASE};
pub use vocab::{decode, tokenize, Vocabulary, BOS, EOS, PAD, SPECIAL_NAMES, UNK};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Session {
    pub pages: Vec<String>,
    /// Epoch seconds of the first event.
    pub timestamp: i64,
}

impl Session {
    pub fn new(pages: Vec<String>, timestamp: i64) -> Self {
        Session { pages, timestamp }
    }

    pub fn len(&self) -> usize {
        self.pages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pages.is_empty()
    }
}

/// One user: chronological input sessions and the final session to predict.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserRecord {
    pub user_id: String,
    pub input_sessions: Vec<Session>,
    pub actual_session: Session,
}

impl UserRecord {
    /// Splits chronologically ordered sessions; needs at least two.
    pub fn from_sessions(user_id: impl Into<String>, mut sessions: Vec<Session>) -> Option<Self> {
        if sessions.len() < 2 {
            return None;
        }
        let actual_session = sessions.pop()?;
        Some(UserRecord {
            user_id: user_id.into(),
            input_sessions: sessions,
            actual_session,
        })
    }

    pub fn sessions(&self) -> impl Iterator<Item = &Session> {
        self.input_sessions.iter().chain(std::iter::once(&self.actual_session))
    }

    pub fn into_sessions(self) -> Vec<Session> {
        let mut all = self.input_sessions;
        all.push(self.actual_session);
        all
    }

    /// Pages of every input session, in order.
    pub fn input_pages(&self) -> impl Iterator<Item = &str> {
        self.input_sessions.iter().flat_map(|s| s.pages.iter().map(String::as_str))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitTag {
    Train,
    Test,
    All,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionDataset {
    pub records: Vec<UserRecord>,
    pub split: SplitTag,
}

impl SessionDataset {
    pub fn new(records: Vec<UserRecord>, split: SplitTag) -> Self {
        SessionDataset { records, split }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Content hash over the canonical JSONL serialization.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        for r in &self.records {
            h.update(serde_json::to_vec(r).expect("records serialize"));
            h.update(b"\n");
        }
        crate::tensor::hex(&h.finalize())
    }

    /// Fraction of page occurrences that the vocabulary maps to UNK.
    pub fn unk_rate(&self, vocab: &Vocabulary) -> f64 {
        let (mut unk, mut total) = (0usize, 0usize);
        for s in self.records.iter().flat_map(UserRecord::sessions) {
            for p in &s.pages {
                total += 1;
                if vocab.get(p).is_none() {
                    unk += 1;
                }
            }
        }
        if total == 0 {
            0.0
        } else {
            unk as f64 / total as f64
        }
    }

    /// Writes one JSON record per line.
    pub fn save_jsonl(&self, path: &Path) -> Result<()> {
        let f = File::create(path).map_err(|e| Error::file(path, e))?;
        let mut w = BufWriter::new(f);
        for r in &self.records {
            serde_json::to_writer(&mut w, r)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load_jsonl(path: &Path, split: SplitTag) -> Result<Self> {
        let f = File::open(path).map_err(|e| Error::file(path, e))?;
        let mut records = Vec::new();
        for (i, line) in BufReader::new(f).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let r: UserRecord = serde_json::from_str(&line)
                .map_err(|e| Error::Malformed(format!("{}:{}: {e}", path.display(), i + 1)))?;
            if r.input_sessions.is_empty() {
                return Err(Error::Malformed(format!("{}:{}: record has no input sessions", path.display(), i + 1)));
            }
            records.push(r);
        }
        Ok(SessionDataset { records, split })
    }
}

/// User-level split. Both sides keep the original record order.
pub fn split_train_test(
    dataset: &SessionDataset,
    test_fraction: f64,
    seed: u64,
) -> Result<(SessionDataset, SessionDataset)> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::Config(format!("test_fraction must be in (0, 1), got {test_fraction}")));
    }
    let n = dataset.len();
    let n_test = (n as f64 * test_fraction).round() as usize;
    if n_test == 0 || n_test == n {
        return Err(Error::Config(format!(
            "test_fraction {test_fraction} over {n} users leaves one side empty"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    SeededRng::new(seed).split_named("split").shuffle(&mut order);
    let mut is_test = vec![false; n];
    for &i in &order[..n_test] {
        is_test[i] = true;
    }
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (r, t) in dataset.records.iter().zip(is_test) {
        if t {
            test.push(r.clone());
        } else {
            train.push(r.clone());
        }
    }
    Ok((SessionDataset::new(train, SplitTag::Train), SessionDataset::new(test, SplitTag::Test)))
}
