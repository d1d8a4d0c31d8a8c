use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{Session, SessionDataset, SplitTag, UserRecord};
use crate::error::{Error, Result};
use crate::tensor::SeededRng;

pub const CART: &str = "Cart";
pub const PURCHASE: &str = "Purchase";

/// One behaviour group: a first-order Markov chain over its own pages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSpec {
    pub pages: Vec<String>,
    /// Distribution of the first page of a session.
    pub initial: Vec<f64>,
    /// Row-stochastic `pages × pages` transition matrix.
    pub transitions: Vec<Vec<f64>>,
    pub users: usize,
    /// Probability that a session ends with a Cart page.
    pub p_cart: f64,
    /// Probability of a Purchase page after Cart.
    pub p_purchase: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PopulationSpec {
    pub groups: Vec<GroupSpec>,
    /// Inclusive range of sessions per user (at least 2).
    pub sessions_per_user: (usize, usize),
    /// Inclusive range of browsing pages per session, before outcome pages.
    pub session_len: (usize, usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthOutput {
    pub dataset: SessionDataset,
    /// Hidden group of every user, keyed by user id.
    pub groups: BTreeMap<String, usize>,
}

impl SynthOutput {
    /// Group labels aligned with `dataset.records`.
    pub fn labels_for(&self, dataset: &SessionDataset) -> Vec<usize> {
        dataset.records.iter().map(|r| self.groups[&r.user_id]).collect()
    }
}

fn normalized(w: &[f64]) -> Vec<f64> {
    let s: f64 = w.iter().sum();
    w.iter().map(|v| v / s).collect()
}

impl PopulationSpec {
    /// `groups` disjoint page sets of `pages_per_group` pages each. Every
    /// page has `branching` random successors; outcome rates rise with the
    /// group index.
    pub fn disjoint(groups: usize, pages_per_group: usize, users_per_group: usize, seed: u64) -> Self {
        let branching = 3.min(pages_per_group.saturating_sub(1)).max(1);
        let root = SeededRng::new(seed).split_named("population");
        let specs = (0..groups)
            .map(|g| {
                let mut rng = root.split(g as u64);
                let prefix = group_prefix(g);
                let pages: Vec<String> = (0..pages_per_group).map(|i| format!("{prefix}{i:02}")).collect();
                let transitions = (0..pages_per_group)
                    .map(|from| {
                        let mut row = vec![0.0; pages_per_group];
                        let mut candidates: Vec<usize> = (0..pages_per_group).filter(|&j| j != from || pages_per_group == 1).collect();
                        rng.shuffle(&mut candidates);
                        for &j in candidates.iter().take(branching) {
                            row[j] = 0.2 + rng.uniform();
                        }
                        normalized(&row)
                    })
                    .collect();
                let frac = if groups > 1 { g as f64 / (groups - 1) as f64 } else { 0.5 };
                GroupSpec {
                    initial: vec![1.0 / pages_per_group as f64; pages_per_group],
                    pages,
                    transitions,
                    users: users_per_group,
                    p_cart: 0.15 + 0.4 * frac,
                    p_purchase: 0.3 + 0.4 * frac,
                }
            })
            .collect();
        PopulationSpec {
            groups: specs,
            sessions_per_user: (3, 5),
            session_len: (3, 7),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.groups.is_empty() {
            return Err(Error::Config("population needs at least one group".into()));
        }
        let (smin, smax) = self.sessions_per_user;
        if smin < 2 || smax < smin {
            return Err(Error::Config(format!("sessions_per_user {smin}..={smax} must start at 2 or more")));
        }
        let (lmin, lmax) = self.session_len;
        if lmin < 1 || lmax < lmin {
            return Err(Error::Config(format!("session_len {lmin}..={lmax} is invalid")));
        }
        for (g, spec) in self.groups.iter().enumerate() {
            let n = spec.pages.len();
            if spec.users == 0 {
                return Err(Error::Config(format!("group {g} has zero users")));
            }
            if n == 0 || spec.initial.len() != n || spec.transitions.len() != n || spec.transitions.iter().any(|r| r.len() != n) {
                return Err(Error::Config(format!("group {g}: initial/transitions must match its {n} pages")));
            }
            let rows = std::iter::once(&spec.initial).chain(&spec.transitions);
            for row in rows {
                let s: f64 = row.iter().sum();
                if row.iter().any(|&p| p.is_nan() || p < 0.0) || (s - 1.0).abs() > 1e-6 {
                    return Err(Error::Config(format!("group {g}: probability row does not sum to 1")));
                }
            }
            for p in [spec.p_cart, spec.p_purchase] {
                if !(0.0..=1.0).contains(&p) {
                    return Err(Error::Config(format!("group {g}: outcome probability {p} outside [0, 1]")));
                }
            }
            if spec.pages.iter().any(|p| p == CART || p == PURCHASE || p.is_empty()) {
                return Err(Error::Config(format!("group {g}: page names must be non-empty and not outcome pages")));
            }
        }
        Ok(())
    }

    /// Generates the population. Users get opaque ids in a seeded random
    /// order so neither id nor position reveals the group.
    pub fn synthesize(&self, seed: u64) -> Result<SynthOutput> {
        self.validate()?;
        let root = SeededRng::new(seed);
        let mut users: Vec<(usize, usize)> = self
            .groups
            .iter()
            .enumerate()
            .flat_map(|(g, spec)| (0..spec.users).map(move |u| (g, u)))
            .collect();
        root.split_named("user-order").shuffle(&mut users);

        let gen_root = root.split_named("sessions");
        let mut records = Vec::with_capacity(users.len());
        let mut groups = BTreeMap::new();
        for (idx, &(g, u)) in users.iter().enumerate() {
            let mut rng = gen_root.split(g as u64).split(u as u64);
            let id = format!("u{idx:06}");
            let sessions = self.user_sessions(&self.groups[g], idx, &mut rng);
            records.push(UserRecord::from_sessions(id.clone(), sessions).expect("at least two sessions"));
            groups.insert(id, g);
        }
        Ok(SynthOutput {
            dataset: SessionDataset::new(records, SplitTag::All),
            groups,
        })
    }

    fn user_sessions(&self, spec: &GroupSpec, idx: usize, rng: &mut SeededRng) -> Vec<Session> {
        let (smin, smax) = self.sessions_per_user;
        let (lmin, lmax) = self.session_len;
        let n_sessions = smin + rng.below(smax - smin + 1);
        let base = 1_600_000_000 + idx as i64 * 1000;
        (0..n_sessions)
            .map(|s| {
                let len = lmin + rng.below(lmax - lmin + 1);
                let mut state = rng.weighted_index(&spec.initial);
                let mut pages = Vec::with_capacity(len + 2);
                pages.push(spec.pages[state].clone());
                for _ in 1..len {
                    state = rng.weighted_index(&spec.transitions[state]);
                    pages.push(spec.pages[state].clone());
                }
                if rng.uniform() < spec.p_cart {
                    pages.push(CART.to_string());
                    if rng.uniform() < spec.p_purchase {
                        pages.push(PURCHASE.to_string());
                    }
                }
                Session::new(pages, base + s as i64 * 86_400)
            })
            .collect()
    }

    /// Vocabulary-sized page count: every group page plus the two outcomes.
    pub fn distinct_pages(&self) -> usize {
        let mut all: Vec<&String> = self.groups.iter().flat_map(|g| &g.pages).collect();
        all.sort();
        all.dedup();
        all.len() + 2
    }
}

fn group_prefix(g: usize) -> String {
    let mut s = String::new();
    let mut n = g;
    loop {
        s.insert(0, (b'A' + (n % 26) as u8) as char);
        if n < 26 {
            break;
        }
        n = n / 26 - 1;
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_group_uses_own_pages() {
        let mut spec = PopulationSpec::disjoint(1, 5, 10, 1);
        spec.session_len = (3, 3);
        let out = spec.synthesize(2).unwrap();
        assert_eq!(out.dataset.len(), 10);
        let allowed = &spec.groups[0].pages;
        for r in &out.dataset.records {
            for s in r.sessions() {
                assert!(s.pages.len() >= 3);
                assert!(s.pages[..3].iter().all(|p| allowed.contains(p)));
            }
        }
    }

    #[test]
    fn same_seed_same_population() {
        let spec = PopulationSpec::disjoint(3, 8, 20, 4);
        assert_eq!(spec.synthesize(9).unwrap(), spec.synthesize(9).unwrap());
        assert_ne!(spec.synthesize(9).unwrap().dataset, spec.synthesize(10).unwrap().dataset);
    }

    #[test]
    fn disjoint_groups_do_not_leak() {
        let spec = PopulationSpec::disjoint(3, 8, 30, 4);
        let out = spec.synthesize(1).unwrap();
        for r in &out.dataset.records {
            let own = &spec.groups[out.groups[&r.user_id]].pages;
            for s in r.sessions() {
                for p in &s.pages {
                    assert!(own.contains(p) || p == CART || p == PURCHASE, "{p}");
                }
            }
        }
    }

    #[test]
    fn zero_user_group_is_rejected() {
        let mut spec = PopulationSpec::disjoint(2, 4, 5, 0);
        spec.groups[1].users = 0;
        assert!(spec.synthesize(0).is_err());
    }

    #[test]
    fn prefixes_are_unique() {
        assert_eq!(group_prefix(0), "A");
        assert_eq!(group_prefix(25), "Z");
        assert_eq!(group_prefix(26), "AA");
    }
}
