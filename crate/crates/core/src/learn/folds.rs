//! Stratified K-fold planning with K bounded by the smallest class.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::LearnError;
use crate::model::ValenceClass;

pub const DEFAULT_K_MAX: usize = 10;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub k: usize,
    /// Fold index of each instance.
    pub assignment: Vec<usize>,
}

impl FoldPlan {
    /// (train, test) index lists for fold `f`.
    pub fn split(&self, f: usize) -> (Vec<usize>, Vec<usize>) {
        let mut train = Vec::new();
        let mut test = Vec::new();
        for (i, &a) in self.assignment.iter().enumerate() {
            if a == f {
                test.push(i);
            } else {
                train.push(i);
            }
        }
        (train, test)
    }

    pub fn fold_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for &a in &self.assignment {
            sizes[a] += 1;
        }
        sizes
    }
}

/// K = min(k_max, smallest class count). Each class is shuffled with the
/// seed, classes are laid end to end, and position `i` goes to fold
/// `i mod K`, so every fold sees every class and sizes differ by at most one.
pub fn select_k(labels: &[ValenceClass], k_max: usize, seed: u64) -> Result<FoldPlan, LearnError> {
    let mut by_class: BTreeMap<ValenceClass, Vec<usize>> = BTreeMap::new();
    for (i, &c) in labels.iter().enumerate() {
        by_class.entry(c).or_default().push(i);
    }
    if by_class.len() < 2 {
        return Err(LearnError::SingleClass(by_class.len()));
    }
    let min_count = by_class.values().map(Vec::len).min().unwrap_or(0);
    let k = k_max.min(min_count);
    if k < 2 {
        return Err(LearnError::UnsatisfiableFolds(min_count));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut assignment = vec![0; labels.len()];
    let mut pos = 0;
    for members in by_class.values_mut() {
        members.shuffle(&mut rng);
        for &i in members.iter() {
            assignment[i] = pos % k;
            pos += 1;
        }
    }
    Ok(FoldPlan { k, assignment })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use ValenceClass::*;

    fn labels(neg: usize, neu: usize, pos: usize) -> Vec<ValenceClass> {
        let mut v = vec![Negative; neg];
        v.extend(vec![Neutral; neu]);
        v.extend(vec![Positive; pos]);
        v
    }

    #[test]
    fn spec_examples() {
        assert_eq!(select_k(&labels(10, 10, 10), 5, 1).unwrap().k, 5);
        assert_eq!(select_k(&labels(3, 50, 50), 10, 1).unwrap().k, 3);
        assert!(matches!(select_k(&labels(1, 50, 50), 10, 1), Err(LearnError::UnsatisfiableFolds(1))));
        assert!(matches!(select_k(&labels(0, 0, 50), 10, 1), Err(LearnError::SingleClass(1))));
    }

    #[test]
    fn seed_changes_assignment_not_shape() {
        let l = labels(12, 20, 30);
        let a = select_k(&l, 10, 1).unwrap();
        let b = select_k(&l, 10, 2).unwrap();
        assert_eq!(a, select_k(&l, 10, 1).unwrap());
        assert_ne!(a.assignment, b.assignment);
        assert_eq!(a.fold_sizes(), b.fold_sizes());
    }

    proptest! {
        #[test]
        fn folds_are_balanced_and_stratified(neg in 0usize..40, neu in 2usize..40, pos in 2usize..40,
                                             k_max in 2usize..12, seed: u64) {
            let l = labels(neg, neu, pos);
            match select_k(&l, k_max, seed) {
                Ok(plan) => {
                    let sizes = plan.fold_sizes();
                    prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
                    for f in 0..plan.k {
                        let (_, test) = plan.split(f);
                        for c in [Negative, Neutral, Positive] {
                            let present = l.contains(&c);
                            let in_fold = test.iter().any(|&i| l[i] == c);
                            prop_assert_eq!(present, in_fold);
                        }
                    }
                }
                Err(_) => prop_assert!(neg == 1),
            }
        }
    }
}
