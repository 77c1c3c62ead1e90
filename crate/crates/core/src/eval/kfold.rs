//! Stratified k-fold splits.

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::seeds::{self, tag};

/// Indices of one fold; both lists are sorted.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Fold {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// Splits sample indices into `k` folds with per-class counts differing by
/// at most one between folds.
///
/// Each class is shuffled with the seeded generator and dealt round-robin;
/// the starting fold of each class continues where the previous class
/// stopped so fold sizes also stay within one of each other.
pub fn stratified_kfold(labels: &[usize], k: usize, seed: u64) -> Result<Vec<Fold>> {
    if k < 2 {
        return Err(Error::Config(format!("need at least 2 folds, got {k}")));
    }
    let n_classes = labels.iter().max().map_or(0, |m| m + 1);
    let mut rng = seeds::rng(seed, &[tag::FOLD]);
    let mut assignment = vec![0usize; labels.len()];
    let mut offset = 0;
    for class in 0..n_classes {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        if idx.is_empty() {
            continue;
        }
        if idx.len() < k {
            return Err(Error::Config(format!(
                "class {class} has {} samples, fewer than {k} folds",
                idx.len()
            )));
        }
        idx.shuffle(&mut rng);
        for (j, &i) in idx.iter().enumerate() {
            assignment[i] = (offset + j) % k;
        }
        offset += idx.len();
    }
    Ok((0..k)
        .map(|f| {
            let (test, train): (Vec<usize>, Vec<usize>) =
                (0..labels.len()).partition(|&i| assignment[i] == f);
            Fold { train, test }
        })
        .collect())
}
