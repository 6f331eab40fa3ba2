//! Central finite-difference gradient checking.
//!
//! The checker only evaluates forward values; it never consults the tape's
//! backward rules, so it serves as an independent oracle for them.

use crate::tape::{Tape, Var};
use crate::tensor::{Tensor, TensorError};

pub mod suite;

pub const DEFAULT_STEP: f64 = 1e-6;

/// Denominator floor for relative error so that near-zero gradients are
/// compared on an absolute scale.
pub const REL_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    pub max_rel_err: f64,
    pub worst_input: usize,
    pub worst_index: usize,
    pub checked: usize,
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compares reverse-mode gradients of the scalar built by `f` against
/// central differences with step `h`, over every element of every input.
/// The closure may fail with any error a [`TensorError`] converts into.
pub fn check<F, E>(inputs: &[Tensor], h: f64, f: F) -> Result<GradCheck, E>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, E>,
    E: From<TensorError>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;

    let eval = |inputs: &[Tensor]| -> Result<f64, E> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
        let loss = f(&mut tape, &vars)?;
        Ok(tape.value(loss).item())
    };

    let mut report = GradCheck {
        max_rel_err: 0.0,
        worst_input: 0,
        worst_index: 0,
        checked: 0,
    };
    let mut probe = inputs.to_vec();
    for (k, var) in vars.iter().enumerate() {
        let analytic = grads
            .get(*var)
            .map(|g| g.data().to_vec())
            .unwrap_or_else(|| vec![0.0; inputs[k].numel()]);
        for (i, &a) in analytic.iter().enumerate() {
            let x0 = inputs[k].data()[i];
            probe[k].data_mut()[i] = x0 + h;
            let up = eval(&probe)?;
            probe[k].data_mut()[i] = x0 - h;
            let down = eval(&probe)?;
            probe[k].data_mut()[i] = x0;
            let numeric = (up - down) / (2.0 * h);
            let err = rel_err(a, numeric);
            if err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst_input = k;
                report.worst_index = i;
            }
            report.checked += 1;
        }
    }
    Ok(report)
}
