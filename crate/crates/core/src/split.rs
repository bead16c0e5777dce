//! Seeded train/validation/test splits.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Positions into an item list (labeled nodes or target edges).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
    pub seed: u64,
}

/// Shuffles `0..n` with `seed` and cuts `round(n·train)`, `round(n·val)`, rest.
pub fn make_splits(n: usize, train: f64, val: f64, seed: u64) -> Result<Split> {
    if !(train > 0.0 && val > 0.0 && train + val < 1.0) {
        return Err(Error::Config(format!("split ratios {train}/{val} must be positive and leave a test share")));
    }
    let mut items: Vec<usize> = (0..n).collect();
    items.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = (n as f64 * train).round() as usize;
    let n_val = ((n as f64 * val).round() as usize).min(n - n_train.min(n));
    let n_train = n_train.min(n);
    let test = items.split_off(n_train + n_val);
    let val_items = items.split_off(n_train);
    for (name, part) in [("train", &items), ("validation", &val_items), ("test", &test)] {
        if part.is_empty() {
            return Err(Error::EmptySplit(format!("{name} split of {n} items is empty")));
        }
    }
    Ok(Split {
        train: items,
        val: val_items,
        test,
        seed,
    })
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    #[test]
    fn standard_ratios() {
        let s = make_splits(100, 0.24, 0.06, 1).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (24, 6, 70));
    }

    #[test]
    fn empty_validation_is_an_error() {
        assert!(matches!(make_splits(10, 0.5, 0.01, 0), Err(Error::EmptySplit(_))));
    }

    #[test]
    fn same_seed_same_split() {
        assert_eq!(make_splits(50, 0.24, 0.06, 7).unwrap(), make_splits(50, 0.24, 0.06, 7).unwrap());
        assert_ne!(make_splits(50, 0.24, 0.06, 7).unwrap(), make_splits(50, 0.24, 0.06, 8).unwrap());
    }

    proptest! {
        #[test]
        fn splits_partition_the_items(n in 20usize..300, seed in any::<u64>()) {
            let s = make_splits(n, 0.24, 0.06, seed).unwrap();
            let mut all: Vec<usize> = s.train.iter().chain(&s.val).chain(&s.test).copied().collect();
            all.sort_unstable();
            prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
        }
    }
}
