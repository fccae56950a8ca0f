use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::MatchMeta;

pub const DEFAULT_TRAIN_FRACTION: f64 = 0.8;

/// Match-level train/test partition; every point follows its match.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitAssignment {
    pub train_match_ids: BTreeSet<String>,
    pub test_match_ids: BTreeSet<String>,
    pub seed: u64,
    pub fraction: f64,
}

impl SplitAssignment {
    pub fn is_train(&self, match_id: &str) -> bool {
        self.train_match_ids.contains(match_id)
    }

    pub fn is_test(&self, match_id: &str) -> bool {
        self.test_match_ids.contains(match_id)
    }
}

/// Shuffles match ids within each season (seasons in ascending order, ids
/// sorted before shuffling) and sends `round(fraction * n)` of each season
/// to training.
pub fn split_matches(matches: &[MatchMeta], seed: u64, fraction: f64) -> Result<SplitAssignment> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::Invalid(format!("split fraction {fraction} not in (0, 1)")));
    }
    let mut by_year: BTreeMap<i32, Vec<&str>> = BTreeMap::new();
    for m in matches {
        by_year.entry(m.year).or_default().push(&m.match_id);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train = BTreeSet::new();
    let mut test = BTreeSet::new();
    for ids in by_year.values_mut() {
        ids.sort_unstable();
        ids.dedup();
        ids.shuffle(&mut rng);
        let n_train = (fraction * ids.len() as f64).round() as usize;
        for (i, id) in ids.iter().enumerate() {
            if i < n_train {
                train.insert(id.to_string());
            } else {
                test.insert(id.to_string());
            }
        }
    }
    Ok(SplitAssignment {
        train_match_ids: train,
        test_match_ids: test,
        seed,
        fraction,
    })
}
