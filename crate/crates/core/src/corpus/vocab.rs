use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{SessionDataset, UserRecord};
use crate::error::{Error, Result};

pub const BOS: usize = 0;
pub const EOS: usize = 1;
pub const PAD: usize = 2;
pub const UNK: usize = 3;
pub const SPECIAL_NAMES: [&str; 4] = ["[BOS]", "[EOS]", "[PAD]", "[UNK]"];

/// Page-level vocabulary: four specials, then pages in lexicographic order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    pages: Vec<String>,
    index: HashMap<String, usize>,
}

#[derive(Serialize, Deserialize)]
struct VocabFile {
    specials: Vec<String>,
    pages: Vec<String>,
}

impl Vocabulary {
    /// Builds from any collection of page names; duplicates are merged.
    pub fn from_pages<'a>(pages: impl IntoIterator<Item = &'a str>) -> Result<Self> {
        let mut set = BTreeSet::new();
        for p in pages {
            if p.is_empty() {
                return Err(Error::Malformed("empty page name".into()));
            }
            if SPECIAL_NAMES.contains(&p) {
                return Err(Error::Malformed(format!("page name `{p}` collides with a special token")));
            }
            set.insert(p.to_string());
        }
        let pages: Vec<String> = set.into_iter().collect();
        let index = pages
            .iter()
            .enumerate()
            .map(|(i, p)| (p.clone(), i + SPECIAL_NAMES.len()))
            .collect();
        Ok(Vocabulary { pages, index })
    }

    /// Every page seen in any session of `dataset`.
    pub fn build(dataset: &SessionDataset) -> Result<Self> {
        if dataset.is_empty() {
            return Err(Error::EmptyDataset("vocabulary construction"));
        }
        Self::from_pages(
            dataset
                .records
                .iter()
                .flat_map(UserRecord::sessions)
                .flat_map(|s| s.pages.iter().map(String::as_str)),
        )
    }

    pub fn size(&self) -> usize {
        SPECIAL_NAMES.len() + self.pages.len()
    }

    pub fn pages(&self) -> &[String] {
        &self.pages
    }

    pub fn get(&self, page: &str) -> Option<usize> {
        self.index.get(page).copied()
    }

    /// Token id of `page`, or UNK.
    pub fn id(&self, page: &str) -> usize {
        self.get(page).unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        if id < SPECIAL_NAMES.len() {
            Some(SPECIAL_NAMES[id])
        } else {
            self.pages.get(id - SPECIAL_NAMES.len()).map(String::as_str)
        }
    }

    /// True for ids that name a real page (not a special).
    pub fn is_page_id(&self, id: usize) -> bool {
        id >= SPECIAL_NAMES.len() && id < self.size()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = VocabFile {
            specials: SPECIAL_NAMES.iter().map(|s| s.to_string()).collect(),
            pages: self.pages.clone(),
        };
        fs::write(path, serde_json::to_string_pretty(&f)?).map_err(|e| Error::file(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
        let f: VocabFile = serde_json::from_str(&text)?;
        if f.specials != SPECIAL_NAMES {
            return Err(Error::Malformed(format!("{}: unexpected specials {:?}", path.display(), f.specials)));
        }
        let v = Self::from_pages(f.pages.iter().map(String::as_str))?;
        if v.pages != f.pages {
            return Err(Error::Malformed(format!("{}: pages must be unique and sorted", path.display())));
        }
        Ok(v)
    }
}

fn encode_session(pages: &[String], vocab: &Vocabulary, out: &mut Vec<usize>) {
    out.push(BOS);
    out.extend(pages.iter().map(|p| vocab.id(p)));
    out.push(EOS);
}

/// Encodes a record as `(input, target)` token ids.
///
/// Input sessions are concatenated and truncated from the front so the most
/// recent `max_context_tokens` survive.
pub fn tokenize(record: &UserRecord, vocab: &Vocabulary, max_context_tokens: usize) -> (Vec<usize>, Vec<usize>) {
    let mut input = Vec::new();
    for s in &record.input_sessions {
        encode_session(&s.pages, vocab, &mut input);
    }
    if input.len() > max_context_tokens {
        input.drain(..input.len() - max_context_tokens);
    }
    let mut target = Vec::with_capacity(record.actual_session.len() + 2);
    encode_session(&record.actual_session.pages, vocab, &mut target);
    (input, target)
}

/// Splits ids back into sessions of page names. Text outside BOS..EOS
/// (for instance a front-truncated first session) forms its own session.
pub fn decode(ids: &[usize], vocab: &Vocabulary) -> Vec<Vec<String>> {
    let mut sessions = Vec::new();
    let mut cur: Option<Vec<String>> = None;
    for &id in ids {
        match id {
            BOS => {
                if let Some(s) = cur.take() {
                    sessions.push(s);
                }
                cur = Some(Vec::new());
            }
            EOS => sessions.push(cur.take().unwrap_or_default()),
            PAD => {}
            _ => cur
                .get_or_insert_with(Vec::new)
                .push(vocab.token(id).unwrap_or(SPECIAL_NAMES[UNK]).to_string()),
        }
    }
    if let Some(s) = cur {
        sessions.push(s);
    }
    sessions
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Session;

    fn rec(input: &[&[&str]], actual: &[&str]) -> UserRecord {
        let mut sessions: Vec<Session> = input
            .iter()
            .enumerate()
            .map(|(i, s)| Session::new(s.iter().map(|p| p.to_string()).collect(), i as i64))
            .collect();
        sessions.push(Session::new(actual.iter().map(|p| p.to_string()).collect(), 99));
        UserRecord::from_sessions("u", sessions).unwrap()
    }

    #[test]
    fn ids_follow_sort_order() {
        let v = Vocabulary::from_pages(["B", "A"]).unwrap();
        assert_eq!(v.get("A"), Some(4));
        assert_eq!(v.get("B"), Some(5));
        assert_eq!(v.size(), 6);
        assert_eq!(v.token(0), Some("[BOS]"));
    }

    #[test]
    fn rejects_bad_names() {
        assert!(Vocabulary::from_pages([""]).is_err());
        assert!(Vocabulary::from_pages(["[EOS]"]).is_err());
    }

    #[test]
    fn tokenize_encodes_sessions() {
        let v = Vocabulary::from_pages(["A", "B", "C"]).unwrap();
        let (x, y) = tokenize(&rec(&[&["A", "B"]], &["C"]), &v, 512);
        assert_eq!(x, vec![0, 4, 5, 1]);
        assert_eq!(y, vec![0, 6, 1]);
        let (x, _) = tokenize(&rec(&[&["A", "B"]], &["C"]), &v, 3);
        assert_eq!(x, vec![4, 5, 1]);
        let (x, _) = tokenize(&rec(&[&["A", "Z"]], &["C"]), &v, 512);
        assert_eq!(x, vec![0, 4, 3, 1]);
    }

    #[test]
    fn decode_inverts_tokenize() {
        let v = Vocabulary::from_pages(["A", "B", "C"]).unwrap();
        let r = rec(&[&["A", "B"], &["C", "Q"]], &["C"]);
        let (x, y) = tokenize(&r, &v, 512);
        assert_eq!(decode(&x, &v), vec![vec!["A", "B"], vec!["C", "[UNK]"]]);
        assert_eq!(decode(&y, &v), vec![vec!["C"]]);
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("v.json");
        let v = Vocabulary::from_pages(["x", "a", "m"]).unwrap();
        v.save(&p).unwrap();
        assert_eq!(Vocabulary::load(&p).unwrap(), v);
    }
}
