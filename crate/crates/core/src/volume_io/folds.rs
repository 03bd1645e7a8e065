use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{DatasetManifest, Split};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldAssignment {
    pub k: usize,
    pub fold_of: BTreeMap<String, usize>,
}

impl FoldAssignment {
    /// Held-out cases of fold `i`, sorted.
    pub fn validation_cases(&self, i: usize) -> Vec<String> {
        self.fold_of
            .iter()
            .filter(|(_, &f)| f == i)
            .map(|(c, _)| c.clone())
            .collect()
    }

    pub fn training_cases(&self, i: usize) -> Vec<String> {
        self.fold_of
            .iter()
            .filter(|(_, &f)| f != i)
            .map(|(c, _)| c.clone())
            .collect()
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![0; self.k];
        for &f in self.fold_of.values() {
            s[f] += 1;
        }
        s
    }
}

/// Sorts train case ids, shuffles them with a seeded generator and deals
/// them round-robin into `k` folds.
pub fn make_folds(manifest: &DatasetManifest, k: usize, seed: u64) -> Result<FoldAssignment> {
    if k < 2 {
        return Err(Error::InvalidArgument(format!("k must be >= 2, got {k}")));
    }
    let mut ids: Vec<String> = manifest
        .split(Split::Train)
        .map(|e| e.case_id.clone())
        .collect();
    if ids.len() < k {
        return Err(Error::InvalidArgument(format!(
            "{} train cases cannot fill {k} folds",
            ids.len()
        )));
    }
    ids.sort();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let fold_of = ids.into_iter().enumerate().map(|(i, id)| (id, i % k)).collect();
    Ok(FoldAssignment { k, fold_of })
}
