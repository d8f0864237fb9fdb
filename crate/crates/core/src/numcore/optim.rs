use super::params::ParamVector;
use crate::error::{invalid, Result};

/// Whether a step moves against the gradient (training) or along it (unlearning).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    Descend,
    Ascend,
}

/// Momentum SGD: `v <- mu * v + g`, then `theta <- theta -/+ lr * v`.
///
/// The velocity buffer lives in the optimizer and persists across calls
/// until [`Sgd::reset`].
#[derive(Clone, Debug)]
pub struct Sgd {
    lr: f64,
    momentum: f64,
    velocity: Option<ParamVector>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64) -> Result<Self> {
        if !(lr > 0.0) || !lr.is_finite() {
            return Err(invalid(format!("learning rate must be positive, got {lr}")));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(invalid(format!("momentum must lie in [0, 1), got {momentum}")));
        }
        Ok(Self {
            lr,
            momentum,
            velocity: None,
        })
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn momentum(&self) -> f64 {
        self.momentum
    }

    pub fn reset(&mut self) {
        self.velocity = None;
    }

    pub fn step(&mut self, params: &mut ParamVector, grads: &ParamVector, direction: Direction) -> Result<()> {
        params.check_layout(grads, "sgd_step")?;
        let mu = self.momentum;
        let velocity = self.velocity.get_or_insert_with(|| params.zeros_like());
        velocity.check_layout(grads, "sgd_step")?;
        velocity.zip_apply(grads, "sgd_step", |v, g| *v = mu * *v + g)?;
        let signed_lr = match direction {
            Direction::Descend => -self.lr,
            Direction::Ascend => self.lr,
        };
        params.zip_apply(velocity, "sgd_step", |p, v| *p += signed_lr * v)
    }
}

/// One stateless step, as used by the examples and oracles.
pub fn sgd_step(
    params: &ParamVector,
    grads: &ParamVector,
    lr: f64,
    momentum: f64,
    direction: Direction,
) -> Result<ParamVector> {
    let mut out = params.clone();
    Sgd::new(lr, momentum)?.step(&mut out, grads, direction)?;
    Ok(out)
}
