//! Central finite-difference verification of tape gradients.

use super::{Tape, Tensor, Var};
use crate::error::{param_err, Error, Result};

/// Denominator floor for the relative error. Finite-difference noise on an
/// exactly-zero gradient is around `1e-11`, which would otherwise read as a
/// relative error of 1.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(input index, flat element index)` of the worst element.
    pub worst: (usize, usize),
    pub analytic_at_worst: f64,
    pub numeric_at_worst: f64,
    pub checked: usize,
    pub tol: f64,
    pub passed: bool,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

fn eval_scalar<F>(f: &F, inputs: &[Tensor]) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = f(&tape, &vars)?;
    let v = out.value();
    if v.numel() != 1 {
        return Err(Error::Contract(format!(
            "gradient check needs a scalar function, got shape {:?}",
            v.shape()
        )));
    }
    Ok(v.item())
}

/// Compares tape gradients of `f` against `(f(x+h) − f(x−h)) / 2h` for
/// every element of every input.
pub fn grad_check<F>(f: F, inputs: &[Tensor], step: f64, tol: f64) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    if !(step > 0.0) {
        return Err(param_err!("finite-difference step must be > 0, got {}", step));
    }
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&tape, &vars)?;
    let grads = tape.backward(out)?;
    let analytic: Vec<Tensor> = vars.iter().map(|v| grads.get_or_zeros(*v)).collect();

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        analytic_at_worst: 0.0,
        numeric_at_worst: 0.0,
        checked: 0,
        tol,
        passed: true,
    };
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        for j in 0..input.numel() {
            let orig = input.data()[j];
            work[i].data_mut()[j] = orig + step;
            let plus = eval_scalar(&f, &work)?;
            work[i].data_mut()[j] = orig - step;
            let minus = eval_scalar(&f, &work)?;
            work[i].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let a = analytic[i].data()[j];
            let err = relative_error(a, numeric);
            report.checked += 1;
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = (i, j);
                report.analytic_at_worst = a;
                report.numeric_at_worst = numeric;
            }
        }
    }
    report.passed = report.max_rel_error < tol;
    Ok(report)
}
