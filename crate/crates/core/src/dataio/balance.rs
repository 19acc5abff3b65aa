//! Class balancing and stratified splitting.
//!
//! Balancing only looks at trainable records (train split or not yet split);
//! validation and test records pass through untouched and in place.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::augment::AugmentRanges;
use super::manifest::{ManifestRecord, Split};
use crate::error::{Error, Result};

/// Indices of trainable records, by label.
fn trainable_by_class(records: &[ManifestRecord]) -> [Vec<usize>; 2] {
    let mut by = [Vec::new(), Vec::new()];
    for (i, r) in records.iter().enumerate() {
        if r.is_trainable() {
            by[usize::from(r.label.min(1))].push(i);
        }
    }
    by
}

/// Drops random majority-class training records until both classes have
/// the minority count. Survivors keep their original order.
pub fn undersample_majority(records: &[ManifestRecord], seed: u64) -> Result<Vec<ManifestRecord>> {
    let by = trainable_by_class(records);
    if by.iter().any(Vec::is_empty) {
        return Err(Error::Balance(format!(
            "training records per class are {} / {}; both classes are needed",
            by[0].len(),
            by[1].len()
        )));
    }
    let major = usize::from(by[1].len() > by[0].len());
    let keep = by[1 - major].len();
    let mut drop = by[major].clone();
    drop.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    drop.truncate(by[major].len() - keep);
    drop.sort_unstable();
    Ok(records
        .iter()
        .enumerate()
        .filter(|(i, _)| drop.binary_search(i).is_err())
        .map(|(_, r)| r.clone())
        .collect())
}

/// Appends augmented copies of minority-class training records until the
/// classes are even. Copies cycle through a seeded shuffle of the minority,
/// so each original is reused at most once more than any other.
pub fn oversample_with_augmentation(
    records: &[ManifestRecord],
    ranges: &AugmentRanges,
    seed: u64,
) -> Result<Vec<ManifestRecord>> {
    ranges.validate()?;
    let by = trainable_by_class(records);
    let minor = usize::from(by[1].len() < by[0].len());
    if by[minor].is_empty() {
        return Err(Error::Balance("minority class has no training records".into()));
    }
    let deficit = by[1 - minor].len() - by[minor].len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order = by[minor].clone();
    order.shuffle(&mut rng);
    let mut out = records.to_vec();
    for k in 0..deficit {
        let mut copy = records[order[k % order.len()]].clone();
        copy.augment = Some(ranges.sample(&mut rng));
        out.push(copy);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitScheme {
    Fractions { train: f64, val: f64, test: f64 },
    Counts { train: usize, val: usize, test: usize },
}

impl SplitScheme {
    fn counts(&self, n: usize) -> Result<[usize; 3]> {
        match *self {
            SplitScheme::Counts { train, val, test } => {
                if train + val + test > n {
                    return Err(Error::Split(format!(
                        "{train}/{val}/{test} needs {} records, have {n}",
                        train + val + test
                    )));
                }
                Ok([train, val, test])
            }
            SplitScheme::Fractions { train, val, test } => {
                let f = [train, val, test];
                let sum: f64 = f.iter().sum();
                if f.iter().any(|x| !(*x >= 0.0)) || sum > 1.0 + 1e-9 || sum <= 0.0 {
                    return Err(Error::Split(format!("fractions {f:?} must be >= 0 with sum in (0, 1]")));
                }
                let tr = (train * n as f64).round() as usize;
                let va = (val * n as f64).round() as usize;
                // When the fractions cover everything, test takes the rest
                // so rounding never drops or double-books a record.
                let te = if (sum - 1.0).abs() <= 1e-9 {
                    n.saturating_sub(tr + va)
                } else {
                    (test * n as f64).round() as usize
                };
                if tr + va + te > n {
                    return Err(Error::Split(format!("fractions {f:?} overbook {n} records")));
                }
                Ok([tr, va, te])
            }
        }
    }
}

/// Assigns splits with per-class proportions preserved.
///
/// Each class is shuffled and its members spread evenly over `[0, 1)` by
/// rank; the merged order is cut into consecutive train/val/test runs, so
/// every run takes the same share of each class up to one record. Records
/// beyond the requested counts are dropped.
pub fn split_dataset(records: &[ManifestRecord], scheme: SplitScheme, seed: u64) -> Result<Vec<ManifestRecord>> {
    if records.is_empty() {
        return Err(Error::Split("no records to split".into()));
    }
    let counts = scheme.counts(records.len())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut keyed: Vec<(f64, u8, usize)> = Vec::with_capacity(records.len());
    for label in 0..=1u8 {
        let mut members: Vec<usize> = (0..records.len()).filter(|&i| records[i].label == label).collect();
        members.shuffle(&mut rng);
        let n = members.len() as f64;
        keyed.extend(
            members
                .into_iter()
                .enumerate()
                .map(|(rank, i)| ((rank as f64 + 0.5) / n, label, i)),
        );
    }
    keyed.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));

    let mut out = Vec::with_capacity(counts.iter().sum());
    let mut it = keyed.into_iter();
    for (split, count) in Split::ALL.into_iter().zip(counts) {
        for (_, _, i) in it.by_ref().take(count) {
            out.push(records[i].clone().with_split(split));
        }
    }
    Ok(out)
}
