use rand::seq::index;
use serde::{Deserialize, Serialize};

use super::LabeledDataset;
use crate::error::{invalid, Error, Result};
use crate::numcore::rng;

/// How much clean data the defender holds, relative to the training-set size.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub holding_ratio: f64,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            holding_ratio: 0.05,
            seed: 0,
        }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        if self.holding_ratio > 0.0 && self.holding_ratio <= 1.0 {
            Ok(())
        } else {
            Err(invalid(format!(
                "holding ratio must lie in (0, 1], got {}",
                self.holding_ratio
            )))
        }
    }
}

/// `round(ratio * train_size)`, halves rounded up.
pub fn holdout_size(holding_ratio: f64, train_size: usize) -> usize {
    (holding_ratio * train_size as f64 + 0.5).floor() as usize
}

/// The defender's clean holdout and the disjoint evaluation remainder.
#[derive(Clone, Debug)]
pub struct Holdout {
    pub holdout: LabeledDataset,
    pub remainder: LabeledDataset,
    /// Indices into the source set, in draw order.
    pub holdout_indices: Vec<usize>,
}

/// Draws `round(ratio * train_size)` samples uniformly without replacement from `test_set`.
pub fn take_clean_holdout(test_set: &LabeledDataset, train_size: usize, spec: &SplitSpec) -> Result<Holdout> {
    spec.validate()?;
    let count = holdout_size(spec.holding_ratio, train_size);
    if count == 0 {
        return Err(invalid("holdout would be empty; the defender needs at least one sample"));
    }
    if count > test_set.len() {
        return Err(invalid(format!(
            "holdout of {count} samples requested from a set of {}",
            test_set.len()
        )));
    }
    let mut rng = rng::seeded(spec.seed);
    let picked = index::sample(&mut rng, test_set.len(), count).into_vec();
    let mut taken = vec![false; test_set.len()];
    for &i in &picked {
        taken[i] = true;
    }
    let rest: Vec<usize> = (0..test_set.len()).filter(|&i| !taken[i]).collect();
    let mut holdout = test_set.subset(&picked);
    holdout.set_provenance(format!("{}#holdout", test_set.provenance()));
    let mut remainder = test_set.subset(&rest);
    remainder.set_provenance(format!("{}#eval", test_set.provenance()));
    Ok(Holdout {
        holdout,
        remainder,
        holdout_indices: picked,
    })
}

/// Uniform sample of `n` items without replacement, kept in source order.
pub fn random_subset(data: &LabeledDataset, n: usize, seed: u64) -> Result<LabeledDataset> {
    if n == 0 || n > data.len() {
        return Err(Error::InvalidArgument(format!(
            "subset of {n} requested from {} samples",
            data.len()
        )));
    }
    let mut picked = index::sample(&mut rng::seeded(seed), data.len(), n).into_vec();
    picked.sort_unstable();
    let mut out = data.subset(&picked);
    out.set_provenance(format!("{}#subset{n}", data.provenance()));
    Ok(out)
}
