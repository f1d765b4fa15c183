use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const MIN_SPLIT_IDS: usize = 10;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

/// Seeded 70/10/20 split: `floor(0.7 n)` train, `floor(0.1 n)` validation,
/// the remainder test. Input order does not matter.
pub fn split_dataset(ids: &[String], seed: u64) -> Result<DatasetSplit> {
    if ids.len() < MIN_SPLIT_IDS {
        return Err(Error::TooFewIds {
            needed: MIN_SPLIT_IDS,
            got: ids.len(),
        });
    }
    let mut ids = ids.to_vec();
    ids.sort();
    ids.dedup();
    if ids.len() < MIN_SPLIT_IDS {
        return Err(Error::TooFewIds {
            needed: MIN_SPLIT_IDS,
            got: ids.len(),
        });
    }
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n = ids.len();
    let n_train = n * 7 / 10;
    let n_val = n / 10;
    let test = ids.split_off(n_train + n_val);
    let val = ids.split_off(n_train);
    Ok(DatasetSplit { train: ids, val, test })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("s{i:04}")).collect()
    }

    #[test]
    fn sizes_follow_floor_rule() {
        for (n, expect) in [(800, (560, 80, 160)), (10, (7, 1, 2)), (19, (13, 1, 5)), (200, (140, 20, 40))] {
            let s = split_dataset(&ids(n), 3).unwrap();
            assert_eq!((s.train.len(), s.val.len(), s.test.len()), expect, "n={n}");
        }
    }

    #[test]
    fn disjoint_cover_and_deterministic() {
        let all = ids(57);
        let a = split_dataset(&all, 9).unwrap();
        assert_eq!(a, split_dataset(&all, 9).unwrap());
        assert_ne!(a, split_dataset(&all, 10).unwrap());
        let mut reversed = all.clone();
        reversed.reverse();
        assert_eq!(a, split_dataset(&reversed, 9).unwrap());
        let union: BTreeSet<_> = a.train.iter().chain(&a.val).chain(&a.test).collect();
        assert_eq!(union.len(), 57);
    }

    #[test]
    fn too_few_ids() {
        assert!(matches!(split_dataset(&ids(9), 0), Err(Error::TooFewIds { needed: 10, got: 9 })));
    }
}
