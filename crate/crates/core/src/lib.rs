//! Backdoor injection, trigger-pattern recovery and unlearning-based erasure
//! for small image classifiers.
//!
//! The crate is organized bottom-up:
//!
//! - [`numcore`]: tensors, reverse-mode autodiff, momentum SGD, checkpoints
//! - [`netlab`]: victim classifiers, training and accuracy
//! - [`datapipe`]: IDX ingestion and the defender's clean holdout
//! - [`poisoner`]: ground-truth triggers, dataset poisoning, attack success rate
//! - [`recovery`]: generator-based trigger recovery into a validated pool
//! - [`eraser`]: gradient-ascent unlearning with a dynamic weighted penalty

pub mod datapipe;
pub mod eraser;
mod error;
pub mod netlab;
pub mod numcore;
pub mod pgm;
pub mod poisoner;
pub mod recovery;

pub use datapipe::{LabeledDataset, SplitSpec};
pub use eraser::{Objective, UnlearnConfig};
pub use error::{Error, Result};
pub use netlab::{ArchKind, Classifier, TrainConfig};
pub use numcore::{Direction, ParamVector, Scalar, Sgd, Tape, Tensor, Var};
pub use poisoner::{Perturbation, TriggerSpec};
pub use recovery::{RecoveryConfig, TriggerPool};
