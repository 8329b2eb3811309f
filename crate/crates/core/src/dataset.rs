//! A catalog with its pairs split for training, validation and test.

use serde::{Deserialize, Serialize};

use crate::catalog::{sample_triplets_excluding, split_pairs, Catalog, PairSet, SplitFractions, Triplet};
use crate::error::Result;
use crate::rules::RuleSet;

const TEST_SALT: u64 = 0x7e57;

#[derive(Debug, Clone)]
pub struct Dataset {
    pub catalog: Catalog,
    pub rules: RuleSet,
    pub train: PairSet,
    pub valid: PairSet,
    pub test: PairSet,
    pub seed: u64,
}

/// Sizes of the three parts, for reports.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSizes {
    pub train: usize,
    pub valid: usize,
    pub test: usize,
}

impl Dataset {
    pub fn split(catalog: Catalog, pairs: &PairSet, rules: RuleSet, fractions: SplitFractions, seed: u64) -> Result<Self> {
        let (train, valid, test) = split_pairs(pairs, fractions, seed)?;
        Ok(Dataset {
            catalog,
            rules,
            train,
            valid,
            test,
            seed,
        })
    }

    /// Every positive pair across the three parts.
    pub fn known(&self) -> PairSet {
        self.train.union(&self.valid).union(&self.test)
    }

    /// `m` triplets per test pair; negatives avoid all known positives.
    pub fn test_triplets(&self, m: usize) -> Result<Vec<Triplet>> {
        sample_triplets_excluding(&self.catalog, &self.test, &self.known(), m, self.seed ^ TEST_SALT)
    }

    pub fn sizes(&self) -> SplitSizes {
        SplitSizes {
            train: self.train.len(),
            valid: self.valid.len(),
            test: self.test.len(),
        }
    }
}
