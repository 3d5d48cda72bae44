//! Finite-difference gradient checking.
//!
//! Compares tape gradients against central differences
//! (f(x+eps) − f(x−eps)) / (2·eps), coordinate by coordinate.

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const DEFAULT_EPS: f64 = 1e-5;
pub const DEFAULT_TOL: f64 = 1e-4;
/// Coordinates whose analytic and numeric derivatives differ by less
/// than this are accepted outright: near-zero gradients sit below the
/// noise floor of central differences (cancellation leaves ~1e-11 of
/// error at eps 1e-5), where a relative test measures only that noise.
pub const ABS_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub pass: bool,
    pub max_rel_err: f64,
    /// (tensor index, coordinate) of the worst disagreement.
    pub worst: (usize, usize),
    pub analytic_at_worst: f64,
    pub numeric_at_worst: f64,
}

/// Checks the analytic gradient of a scalar-valued `f` at `points`.
///
/// `f` rebuilds its graph on the given tape from the leaf vars it is
/// handed, so it is evaluated fresh at every perturbed point. Relative
/// error is |a−n| / max(1e-8, |a|+|n|).
pub fn grad_check_multi<F>(
    f: F,
    points: &[Tensor],
    eps: f64,
    tol: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |tensors: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = tensors.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        if !tape.value(out).is_scalar() {
            return Err(Error::NonScalarLoss(format!(
                "{:?}",
                tape.value(out).shape()
            )));
        }
        Ok(tape.value(out).item())
    };

    // analytic pass
    let mut tape = Tape::new();
    let vars: Vec<Var> = points
        .iter()
        .map(|t| tape.leaf_grad(t.clone()))
        .collect();
    let out = f(&mut tape, &vars)?;
    if !tape.value(out).is_scalar() {
        return Err(Error::NonScalarLoss(format!("{:?}", tape.value(out).shape())));
    }
    let grads = tape.backward(out)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .map(|&v| grads.wrt(v).cloned().expect("leaf gradient"))
        .collect();

    let mut report = GradCheckReport {
        pass: true,
        max_rel_err: 0.0,
        worst: (0, 0),
        analytic_at_worst: 0.0,
        numeric_at_worst: 0.0,
    };

    let mut work: Vec<Tensor> = points.to_vec();
    for ti in 0..work.len() {
        for ci in 0..work[ti].numel() {
            let orig = work[ti].data()[ci];
            work[ti].data_mut()[ci] = orig + eps;
            let fp = eval(&work)?;
            work[ti].data_mut()[ci] = orig - eps;
            let fm = eval(&work)?;
            work[ti].data_mut()[ci] = orig;

            let numeric = (fp - fm) / (2.0 * eps);
            let a = analytic[ti].data()[ci];
            if (a - numeric).abs() <= ABS_FLOOR {
                continue;
            }
            let rel = (a - numeric).abs() / f64::max(1e-8, a.abs() + numeric.abs());
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = (ti, ci);
                report.analytic_at_worst = a;
                report.numeric_at_worst = numeric;
            }
        }
    }
    report.pass = report.max_rel_err <= tol;
    Ok(report)
}

/// Single-tensor convenience wrapper.
pub fn grad_check<F>(f: F, point: &Tensor, eps: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    grad_check_multi(|tape, vars| f(tape, vars[0]), &[point.clone()], eps, tol)
}
