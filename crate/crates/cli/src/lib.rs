//! Orchestration for backdoor-erasure experiments built on `purify-core`.
//!
//! - [`config`]: the TOML experiment schema and `key=value` overrides
//! - [`pipeline`]: cached stages from victim training to evaluation
//! - [`report`]: `report.json` and the comparison table
//! - [`sweep`]: holding-ratio, beta/alpha and trigger-size grids

pub mod config;
pub mod pipeline;
pub mod report;
pub mod sweep;

pub use config::ExperimentConfig;
pub use pipeline::{Pipeline, Stage, StageError};
pub use report::{Defense, Report, RunStatus};
pub use sweep::Axis;
