use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::AnswerRecord;
use crate::error::{Error, Result};

/// Disjoint labeled partitions plus answers that carry no score.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: Vec<AnswerRecord>,
    pub val: Vec<AnswerRecord>,
    pub test: Vec<AnswerRecord>,
    pub unlabeled: Vec<AnswerRecord>,
}

impl DatasetSplit {
    /// Every record, labeled or not.
    pub fn full(&self) -> Vec<AnswerRecord> {
        let mut v = Vec::with_capacity(self.train.len() + self.val.len() + self.test.len() + self.unlabeled.len());
        v.extend(self.train.iter().cloned());
        v.extend(self.val.iter().cloned());
        v.extend(self.test.iter().cloned());
        v.extend(self.unlabeled.iter().cloned());
        v
    }

    /// Partition that held-out episodes are drawn from: `test` when a
    /// three-way split was made, otherwise `val`.
    pub fn eval_part(&self) -> &[AnswerRecord] {
        if self.test.is_empty() {
            &self.val
        } else {
            &self.test
        }
    }

    /// Pool for unlabeled sampling: the whole dataset, or with `strict` only
    /// the training partition and score-less answers.
    pub fn unlabeled_pool(&self, strict: bool) -> Vec<AnswerRecord> {
        if strict {
            self.train.iter().chain(&self.unlabeled).cloned().collect()
        } else {
            self.full()
        }
    }
}

/// Stratified, seeded train/validation split. `⌊train_fraction·n⌋` labeled
/// records go to `train` (largest-remainder allocation across classes), the
/// rest to `val`. With `min_per_class > 0` every class must keep at least that
/// many records on both sides.
pub fn split_dataset(records: &[AnswerRecord], train_fraction: f64, seed: u64, min_per_class: usize) -> Result<DatasetSplit> {
    split_impl(records, train_fraction, 0.0, seed, min_per_class)
}

/// Like [`split_dataset`] but carves a third `test` partition of
/// `⌊test_fraction·n⌋` records out of what remains after `train`.
pub fn split_three_way(
    records: &[AnswerRecord],
    train_fraction: f64,
    test_fraction: f64,
    seed: u64,
    min_per_class: usize,
) -> Result<DatasetSplit> {
    if !(test_fraction > 0.0 && train_fraction + test_fraction < 1.0) {
        return Err(Error::config(
            "test_fraction",
            format!("need 0 < test_fraction < 1 - train_fraction, got {test_fraction}"),
        ));
    }
    split_impl(records, train_fraction, test_fraction, seed, min_per_class)
}

fn split_impl(
    records: &[AnswerRecord],
    train_fraction: f64,
    test_fraction: f64,
    seed: u64,
    min_per_class: usize,
) -> Result<DatasetSplit> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::config(
            "train_fraction",
            format!("must lie in (0, 1), got {train_fraction}"),
        ));
    }
    if records.is_empty() {
        return Err(Error::EmptyDataset("nothing to split".into()));
    }
    let mut by_class: BTreeMap<i64, Vec<usize>> = BTreeMap::new();
    let mut unlabeled = Vec::new();
    for (i, r) in records.iter().enumerate() {
        match r.score {
            Some(s) => by_class.entry(s).or_default().push(i),
            None => unlabeled.push(r.clone()),
        }
    }
    let counts: Vec<usize> = by_class.values().map(Vec::len).collect();
    let n: usize = counts.iter().sum();
    let train_quota = allocate(&counts, train_fraction, (train_fraction * n as f64).floor() as usize);
    let remaining: Vec<usize> = counts.iter().zip(&train_quota).map(|(c, t)| c - t).collect();
    let test_quota = if test_fraction > 0.0 {
        let total = ((test_fraction * n as f64).floor() as usize).min(remaining.iter().sum());
        let rel = test_fraction / (1.0 - train_fraction);
        allocate(&remaining, rel, total)
    } else {
        vec![0; counts.len()]
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut assignment = vec![0u8; records.len()];
    for (ci, idxs) in by_class.values().enumerate() {
        let mut shuffled = idxs.clone();
        shuffled.shuffle(&mut rng);
        for (pos, &i) in shuffled.iter().enumerate() {
            assignment[i] = if pos < train_quota[ci] {
                0
            } else if pos < train_quota[ci] + test_quota[ci] {
                2
            } else {
                1
            };
        }
    }
    let mut split = DatasetSplit {
        unlabeled,
        ..Default::default()
    };
    for (i, r) in records.iter().enumerate() {
        if r.score.is_none() {
            continue;
        }
        match assignment[i] {
            0 => split.train.push(r.clone()),
            1 => split.val.push(r.clone()),
            _ => split.test.push(r.clone()),
        }
    }

    if min_per_class > 0 {
        for (ci, &score) in by_class.keys().enumerate() {
            let parts = [
                ("train", train_quota[ci]),
                ("val", counts[ci] - train_quota[ci] - test_quota[ci]),
                ("test", test_quota[ci]),
            ];
            for (name, have) in parts {
                if name == "test" && test_fraction == 0.0 {
                    continue;
                }
                if have < min_per_class {
                    return Err(Error::InsufficientData(format!(
                        "class {score} has {have} answers in {name}, needs at least {min_per_class}"
                    )));
                }
            }
        }
    }
    Ok(split)
}

/// Splits `total` across classes proportionally to `fraction·count`, flooring
/// each share and handing leftovers to the largest remainders.
fn allocate(counts: &[usize], fraction: f64, total: usize) -> Vec<usize> {
    let mut quota: Vec<usize> = counts
        .iter()
        .map(|&c| ((fraction * c as f64).floor() as usize).min(c))
        .collect();
    let mut order: Vec<usize> = (0..counts.len()).collect();
    let rem = |i: usize| fraction * counts[i] as f64 - (fraction * counts[i] as f64).floor();
    order.sort_by(|&a, &b| rem(b).total_cmp(&rem(a)).then(a.cmp(&b)));
    let mut left = total.saturating_sub(quota.iter().sum());
    while left > 0 {
        let mut progressed = false;
        for &i in &order {
            if left == 0 {
                break;
            }
            if quota[i] < counts[i] {
                quota[i] += 1;
                left -= 1;
                progressed = true;
            }
        }
        if !progressed {
            break;
        }
    }
    quota
}
