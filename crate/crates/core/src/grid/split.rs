use std::collections::BTreeSet;
use std::ops::Range;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::Region;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SplitMode {
    /// Test on the training regions over held-out later days.
    Standard,
    /// Test on regions never seen in training.
    #[default]
    ZeroShot,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train_regions: Vec<Region>,
    pub test_regions: Vec<Region>,
    pub mode: SplitMode,
    /// In standard mode, the trailing fraction of days reserved for testing.
    pub test_fraction: f64,
    pub seed: u64,
}

impl SplitSpec {
    /// Days used for training out of `n_days`.
    pub fn train_days(&self, n_days: usize) -> Range<usize> {
        match self.mode {
            SplitMode::ZeroShot => 0..n_days,
            SplitMode::Standard => 0..self.boundary(n_days),
        }
    }

    pub fn test_days(&self, n_days: usize) -> Range<usize> {
        match self.mode {
            SplitMode::ZeroShot => 0..n_days,
            SplitMode::Standard => self.boundary(n_days)..n_days,
        }
    }

    fn boundary(&self, n_days: usize) -> usize {
        let test = ((n_days as f64 * self.test_fraction).round() as usize).clamp(1, n_days.saturating_sub(1).max(1));
        n_days - test
    }

    pub fn is_disjoint(&self) -> bool {
        let train: BTreeSet<_> = self.train_regions.iter().collect();
        self.test_regions.iter().all(|r| !train.contains(r))
    }
}

/// Splits regions for the given mode.
///
/// Zero-shot draws `round(test_fraction * n)` test regions (at least one,
/// leaving at least one for training) with a seeded shuffle. Standard mode
/// keeps every region on both sides and splits along days instead.
pub fn make_splits(regions: &[Region], mode: SplitMode, test_fraction: f64, seed: u64) -> Result<SplitSpec> {
    if regions.is_empty() {
        return Err(Error::invalid("no regions to split"));
    }
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::invalid(format!("test_fraction {test_fraction} outside (0, 1)")));
    }
    match mode {
        SplitMode::Standard => Ok(SplitSpec {
            train_regions: regions.to_vec(),
            test_regions: regions.to_vec(),
            mode,
            test_fraction,
            seed,
        }),
        SplitMode::ZeroShot => {
            if regions.len() < 2 {
                return Err(Error::invalid("zero-shot split needs at least two regions"));
            }
            let n_test = ((regions.len() as f64 * test_fraction).round() as usize).clamp(1, regions.len() - 1);
            let mut order: Vec<usize> = (0..regions.len()).collect();
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            let test: BTreeSet<usize> = order[..n_test].iter().copied().collect();
            let (test_regions, train_regions) = regions
                .iter()
                .enumerate()
                .partition::<Vec<_>, _>(|(i, _)| test.contains(i));
            Ok(SplitSpec {
                train_regions: train_regions.into_iter().map(|(_, r)| *r).collect(),
                test_regions: test_regions.into_iter().map(|(_, r)| *r).collect(),
                mode,
                test_fraction,
                seed,
            })
        }
    }
}
