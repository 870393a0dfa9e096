use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{substream, SPLIT};

/// One (repeat, fold) cell of repeated k-fold cross-validation. Index sets
/// are sorted.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub repeat: usize,
    pub fold: usize,
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub test: Vec<usize>,
}

/// Fraction of each training fold held out for early stopping and soup
/// selection.
pub const VALIDATION_FRACTION: f64 = 0.1;

/// Repeated k-fold splitting of `n` indices. Every repeat draws its own
/// permutation; fold sizes differ by at most one. The validation slice is
/// 10% of the remaining training indices (at least one when two or more
/// remain), taken from the same permutation.
pub fn kfold_split(n: usize, k: usize, repeats: usize, seed: u64) -> Result<Vec<Split>> {
    if k < 2 {
        return Err(Error::InvalidArgument(format!("k-fold needs k >= 2, got {k}")));
    }
    if n < k {
        return Err(Error::InvalidArgument(format!("cannot split {n} samples into {k} folds")));
    }
    let mut splits = Vec::with_capacity(k * repeats);
    for repeat in 0..repeats {
        let mut rng = substream(seed, SPLIT, repeat as u64);
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng);
        let (base, extra) = (n / k, n % k);
        let mut bounds = Vec::with_capacity(k + 1);
        bounds.push(0);
        for f in 0..k {
            bounds.push(bounds[f] + base + usize::from(f < extra));
        }
        for fold in 0..k {
            let mut test = perm[bounds[fold]..bounds[fold + 1]].to_vec();
            let mut pool: Vec<usize> = perm[..bounds[fold]]
                .iter()
                .chain(&perm[bounds[fold + 1]..])
                .copied()
                .collect();
            let n_val = if pool.len() >= 2 {
                ((pool.len() as f64 * VALIDATION_FRACTION).round() as usize).max(1)
            } else {
                0
            };
            let mut validation = pool.split_off(pool.len() - n_val);
            test.sort_unstable();
            pool.sort_unstable();
            validation.sort_unstable();
            splits.push(Split {
                repeat,
                fold,
                train: pool,
                validation,
                test,
            });
        }
    }
    Ok(splits)
}

/// Single shuffled train/validation partition with the same validation
/// fraction as the k-fold splits.
pub fn holdout_split(n: usize, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if n < 2 {
        return Err(Error::InvalidArgument(format!("holdout split needs at least 2 samples, got {n}")));
    }
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut substream(seed, SPLIT, u64::MAX));
    let n_val = ((n as f64 * VALIDATION_FRACTION).round() as usize).max(1);
    let mut validation = perm.split_off(n - n_val);
    perm.sort_unstable();
    validation.sort_unstable();
    Ok((perm, validation))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    #[test]
    fn ten_samples_five_folds() {
        let splits = kfold_split(10, 5, 1, 3).unwrap();
        assert_eq!(splits.len(), 5);
        let mut all = BTreeSet::new();
        for s in &splits {
            assert_eq!(s.test.len(), 2);
            for i in &s.test {
                assert!(all.insert(*i), "index {i} in two test folds");
            }
            assert_eq!(s.train.len() + s.validation.len() + s.test.len(), 10);
            assert_eq!(s.validation.len(), 1);
        }
        assert_eq!(all, (0..10).collect());
    }

    #[test]
    fn ten_by_five_is_fifty_reproducible_splits() {
        let a = kfold_split(100, 5, 10, 8).unwrap();
        let b = kfold_split(100, 5, 10, 8).unwrap();
        assert_eq!(a.len(), 50);
        assert_eq!(a, b);
        assert_ne!(a[0].test, a[5].test);
    }

    #[test]
    fn partitions_are_disjoint_per_split() {
        for s in kfold_split(37, 4, 3, 1).unwrap() {
            let tr: BTreeSet<_> = s.train.iter().collect();
            let va: BTreeSet<_> = s.validation.iter().collect();
            let te: BTreeSet<_> = s.test.iter().collect();
            assert!(tr.is_disjoint(&va) && tr.is_disjoint(&te) && va.is_disjoint(&te));
            assert_eq!(tr.len() + va.len() + te.len(), 37);
        }
    }

    #[test]
    fn too_few_samples_is_error() {
        assert!(kfold_split(3, 5, 1, 0).is_err());
        assert!(kfold_split(10, 1, 1, 0).is_err());
    }

    #[test]
    fn holdout_partitions() {
        let (t, v) = holdout_split(25, 4).unwrap();
        assert_eq!(v.len(), 3);
        let mut all: Vec<usize> = t.iter().chain(&v).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..25).collect::<Vec<_>>());
        assert!(holdout_split(1, 0).is_err());
    }
}
