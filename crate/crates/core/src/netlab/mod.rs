//! Victim classifiers: architectures, supervised training and accuracy.

mod arch;
mod train;

pub use arch::{argmax, Arch, ArchKind, Classifier};
pub use train::{accuracy, train, EpochStats, TrainConfig};
pub(crate) use arch::uniform;
pub(crate) use train::EVAL_BATCH_SIZE;
