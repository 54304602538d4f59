//! Central finite-difference gradient checking.
//!
//! The numerical side only ever evaluates forward values on fresh tapes, so it
//! stays independent of the backward rules it is checking.

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Denominator floor for the relative error, so that components whose true
/// gradient is (near) zero are compared on an absolute scale instead.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(input index, element index)` of the worst component.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

/// `|a − n| / max(|a|, |n|, REL_ERROR_FLOOR)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

/// Evaluates `f` at `inputs` (recorded as differentiable leaves) and returns
/// the scalar loss value.
pub fn eval_scalar<F>(inputs: &[Tensor], f: &F) -> Result<f64>
where
    F: Fn(&Tape, &[Var]) -> Result<Var>,
{
    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&tape, &vars)?;
    tape.item(out)
}

/// Analytic gradients of `f` with respect to each input.
pub fn analytic_gradients<F>(inputs: &[Tensor], f: &F) -> Result<Vec<Tensor>>
where
    F: Fn(&Tape, &[Var]) -> Result<Var>,
{
    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&tape, &vars)?;
    let grads = tape.backward(out)?;
    Ok(vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect())
}

/// Central-difference derivative of `f` with respect to every element of
/// every input.
pub fn numeric_gradients<F>(inputs: &[Tensor], f: &F, h: f64) -> Result<Vec<Tensor>>
where
    F: Fn(&Tape, &[Var]) -> Result<Var>,
{
    let mut work: Vec<Tensor> = inputs.to_vec();
    let mut out = Vec::with_capacity(inputs.len());
    for i in 0..inputs.len() {
        let mut g = Tensor::zeros(inputs[i].shape());
        for j in 0..inputs[i].len() {
            let x0 = inputs[i].data()[j];
            work[i].data_mut()[j] = x0 + h;
            let fp = eval_scalar(&work, f)?;
            work[i].data_mut()[j] = x0 - h;
            let fm = eval_scalar(&work, f)?;
            work[i].data_mut()[j] = x0;
            g.data_mut()[j] = (fp - fm) / (2.0 * h);
        }
        out.push(g);
    }
    Ok(out)
}

pub fn check_gradients<F>(inputs: &[Tensor], f: F, h: f64) -> Result<GradCheckReport>
where
    F: Fn(&Tape, &[Var]) -> Result<Var>,
{
    if !(h > 0.0) {
        return Err(Error::invalid("finite-difference step must be positive"));
    }
    let analytic = analytic_gradients(inputs, &f)?;
    let numeric = numeric_gradients(inputs, &f, h)?;
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
    };
    for (i, (a, n)) in analytic.iter().zip(&numeric).enumerate() {
        for (j, (&av, &nv)) in a.data().iter().zip(n.data()).enumerate() {
            let e = relative_error(av, nv);
            report.checked += 1;
            if e > report.max_rel_error || !e.is_finite() {
                report.max_rel_error = e;
                report.worst = (i, j);
                report.analytic = av;
                report.numeric = nv;
            }
        }
    }
    Ok(report)
}
