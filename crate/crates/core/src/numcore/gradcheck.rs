//! Central finite-difference checks of reverse-mode gradients.

use super::{BoundParams, ParamVector, Scalar, Tape, Var};
use crate::error::{invalid, Result};

/// Relative errors are measured against at least this denominator.
pub const DENOMINATOR_FLOOR: Scalar = 1e-6;

/// Outcome of comparing autodiff against central differences on every parameter coordinate.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    pub coordinates: usize,
    /// `max_k |a_k - n_k| / max(|a_k|, |n_k|, DENOMINATOR_FLOOR)`.
    pub max_relative_error: Scalar,
    /// Flat index of the coordinate attaining the maximum.
    pub worst: usize,
    /// Autodiff and finite-difference values at `worst`.
    pub worst_pair: (Scalar, Scalar),
}

fn evaluate<F>(params: &ParamVector, loss: &F) -> Result<Scalar>
where
    F: for<'t> Fn(&'t Tape, &BoundParams<'t>) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let bound = tape.bind(params, false)?;
    loss(&tape, &bound)?.item()
}

/// Compares the tape gradient of `loss` at `params` with `(f(θ + h e_k) - f(θ - h e_k)) / 2h` for every `k`.
pub fn check<F>(params: &ParamVector, h: Scalar, loss: F) -> Result<GradCheck>
where
    F: for<'t> Fn(&'t Tape, &BoundParams<'t>) -> Result<Var<'t>>,
{
    if !(h > 0.0 && h.is_finite()) {
        return Err(invalid("finite-difference step must be positive"));
    }
    let analytic = {
        let tape = Tape::new();
        let bound = tape.bind(params, true)?;
        let l = loss(&tape, &bound)?;
        tape.backward(l)?.for_params(&bound).flatten()
    };
    let flat = params.flatten();
    let mut report = GradCheck {
        coordinates: flat.len(),
        max_relative_error: 0.0,
        worst: 0,
        worst_pair: (0.0, 0.0),
    };
    for (k, &a) in analytic.iter().enumerate() {
        let mut shifted = flat.clone();
        shifted[k] = flat[k] + h;
        let plus = evaluate(&params.unflatten(&shifted)?, &loss)?;
        shifted[k] = flat[k] - h;
        let minus = evaluate(&params.unflatten(&shifted)?, &loss)?;
        let n = (plus - minus) / (2.0 * h);
        let rel = (a - n).abs() / a.abs().max(n.abs()).max(DENOMINATOR_FLOOR);
        if rel > report.max_relative_error {
            report.max_relative_error = rel;
            report.worst = k;
            report.worst_pair = (a, n);
        }
    }
    Ok(report)
}
