//! Labeled image datasets, IDX ingestion and the defender's clean holdout.

mod dataset;
pub mod idx;
mod split;

pub use dataset::LabeledDataset;
pub use idx::{load_idx, write_idx};
pub use split::{holdout_size, random_subset, take_clean_holdout, Holdout, SplitSpec};
