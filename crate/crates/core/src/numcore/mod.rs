//! Dense tensors, reverse-mode autodiff and momentum SGD.
//!
//! All arithmetic is carried out in `f64` ([`Scalar`]); mixing widths is not supported.

pub mod checkpoint;
pub mod gradcheck;
mod kernels;
mod optim;
mod params;
pub mod rng;
mod tape;
mod tensor;

pub use optim::{sgd_step, Direction, Sgd};
pub use params::ParamVector;
pub use tape::{BoundParams, Gradients, Tape, Var};
pub use tensor::{Scalar, Tensor};
