//! Grouped k-fold splitting by `unique_id`.
//!
//! Fold `i` is the test set, fold `(i + 1) mod k` the validation set and the
//! remaining `k − 2` folds are training data. Without pre-assigned folds,
//! ids are ordered by a seeded SHA-256 digest and dealt round-robin, so fold
//! sizes (in ids) differ by at most one.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::Sample;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub k: usize,
    pub test_fold: usize,
}

impl SplitPlan {
    pub fn new(k: usize, test_fold: usize) -> Result<Self> {
        if k < 3 {
            return Err(Error::config("data.split.k", format!("need k >= 3, got {k}")));
        }
        if test_fold >= k {
            return Err(Error::config(
                "data.split.test_fold",
                format!("{test_fold} is not below k = {k}"),
            ));
        }
        Ok(Self { k, test_fold })
    }

    pub fn val_fold(&self) -> usize {
        (self.test_fold + 1) % self.k
    }

    pub fn train_folds(&self) -> Vec<usize> {
        (0..self.k)
            .filter(|&f| f != self.test_fold && f != self.val_fold())
            .collect()
    }
}

/// Sample indices of each split.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

fn digest(seed: u64, id: &str) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(id.as_bytes());
    h.finalize().into()
}

/// Fold of every sample. Pre-assigned folds are used when every sample has
/// one; otherwise ids are hashed into balanced buckets.
pub fn assign_folds(samples: &[Sample], k: usize, seed: u64) -> Result<Vec<usize>> {
    let assigned = samples.iter().filter(|s| s.fold.is_some()).count();
    if assigned == samples.len() && assigned > 0 {
        let mut by_id: HashMap<&str, usize> = HashMap::new();
        let mut folds = Vec::with_capacity(samples.len());
        for s in samples {
            let f = s.fold.expect("checked above");
            if f >= k {
                return Err(Error::Data(format!(
                    "sample `{}` has fold {f} but k = {k}",
                    s.sample_id
                )));
            }
            if let Some(&prev) = by_id.get(s.unique_id.as_str()) {
                if prev != f {
                    return Err(Error::Data(format!(
                        "unique_id `{}` spans folds {prev} and {f}",
                        s.unique_id
                    )));
                }
            }
            by_id.insert(&s.unique_id, f);
            folds.push(f);
        }
        return Ok(folds);
    }
    if assigned > 0 {
        return Err(Error::Data(format!(
            "{assigned} of {} samples have a fold; assign all or none",
            samples.len()
        )));
    }
    let mut ids: BTreeMap<[u8; 32], &str> = BTreeMap::new();
    for s in samples {
        ids.insert(digest(seed, &s.unique_id), &s.unique_id);
    }
    let fold_of: HashMap<&str, usize> = ids.values().enumerate().map(|(i, &id)| (id, i % k)).collect();
    Ok(samples.iter().map(|s| fold_of[s.unique_id.as_str()]).collect())
}

pub fn kfold_split(samples: &[Sample], plan: &SplitPlan, seed: u64) -> Result<Split> {
    let folds = assign_folds(samples, plan.k, seed)?;
    let mut split = Split::default();
    for (i, f) in folds.into_iter().enumerate() {
        if f == plan.test_fold {
            split.test.push(i);
        } else if f == plan.val_fold() {
            split.val.push(i);
        } else {
            split.train.push(i);
        }
    }
    Ok(split)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Target;
    use crate::tensor::Array;
    use std::collections::HashSet;

    fn samples(ids: &[&str], folds: Option<&[usize]>) -> Vec<Sample> {
        ids.iter()
            .enumerate()
            .map(|(i, id)| Sample {
                unique_id: id.to_string(),
                sample_id: format!("{id}-{i}"),
                input: Array::vector(&[0.0]),
                target: Target::SizeMm(1.0),
                fold: folds.map(|f| f[i]),
            })
            .collect()
    }

    #[test]
    fn six_folds_train_on_four() {
        let p = SplitPlan::new(6, 5).unwrap();
        assert_eq!(p.val_fold(), 0);
        assert_eq!(p.train_folds(), vec![1, 2, 3, 4]);
        assert!(SplitPlan::new(2, 0).is_err());
        assert!(SplitPlan::new(6, 6).is_err());
    }

    #[test]
    fn balanced_hashing_on_232_ids() {
        let names: Vec<String> = (0..232).map(|i| format!("polyp{i}")).collect();
        let refs: Vec<&str> = names.iter().map(String::as_str).collect();
        let folds = assign_folds(&samples(&refs, None), 6, 0).unwrap();
        let mut counts = [0usize; 6];
        folds.iter().for_each(|&f| counts[f] += 1);
        assert!(counts.iter().all(|&c| c == 38 || c == 39), "{counts:?}");
    }

    #[test]
    fn frames_of_one_id_stay_together() {
        let s = samples(&["a", "a", "b", "c", "c", "c", "d", "e"], None);
        let split = kfold_split(&s, &SplitPlan::new(3, 0).unwrap(), 1).unwrap();
        let side = |i: usize| {
            if split.train.contains(&i) {
                0
            } else if split.val.contains(&i) {
                1
            } else {
                2
            }
        };
        let mut where_: HashMap<&str, HashSet<i32>> = HashMap::new();
        for (i, x) in s.iter().enumerate() {
            where_.entry(&x.unique_id).or_default().insert(side(i));
        }
        assert!(where_.values().all(|v| v.len() == 1));
        assert_eq!(split.train.len() + split.val.len() + split.test.len(), s.len());
    }

    #[test]
    fn preassigned_folds() {
        let s = samples(&["a", "a", "b"], Some(&[1, 1, 2]));
        let split = kfold_split(&s, &SplitPlan::new(3, 1).unwrap(), 0).unwrap();
        assert_eq!(split.test, vec![0, 1]);
        assert_eq!(split.val, vec![2]);
        let bad = samples(&["a", "a"], Some(&[0, 1]));
        assert!(assign_folds(&bad, 3, 0).unwrap_err().to_string().contains("spans"));
        let mut partial = samples(&["a", "b"], Some(&[0, 1]));
        partial[1].fold = None;
        assert!(assign_folds(&partial, 3, 0).is_err());
    }
}
