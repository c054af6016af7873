//! Central finite-difference verification of analytic gradients.

use serde::Serialize;

use super::{no_grad, Tensor};
use crate::error::{Error, Result};

/// Magnitudes below this are compared on an absolute scale: the relative
/// error denominator is never smaller than this floor.
pub const DENOMINATOR_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Serialize)]
pub struct ParamGradError {
    pub name: String,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub worst_index: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub step: f64,
    pub tolerance: f64,
    pub params: Vec<ParamGradError>,
    pub max_rel_error: f64,
    pub passed: bool,
}

/// Central differences of `f` with respect to every entry of `param`.
pub fn numeric_grad(param: &Tensor, step: f64, mut f: impl FnMut() -> Result<Tensor>) -> Result<Vec<f64>> {
    let n = param.len();
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let orig = param.data()[i];
        param.data_mut()[i] = orig + step;
        let plus = no_grad(&mut f)?.item()?;
        param.data_mut()[i] = orig - step;
        let minus = no_grad(&mut f)?.item()?;
        param.data_mut()[i] = orig;
        out.push((plus - minus) / (2.0 * step));
    }
    Ok(out)
}

/// Relative error with the absolute fallback for near-zero gradients.
/// A NaN on either side yields infinity.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    if !analytic.is_finite() || !numeric.is_finite() {
        return f64::INFINITY;
    }
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(DENOMINATOR_FLOOR)
}

/// Compares the analytic gradient of the scalar `f` against central
/// differences for every named parameter.
pub fn grad_check(
    mut f: impl FnMut() -> Result<Tensor>,
    params: &[(String, Tensor)],
    step: f64,
    tolerance: f64,
) -> Result<GradCheckReport> {
    if !(step > 0.0 && step <= 1e-3) {
        return Err(Error::contract(format!("grad_check step {step} outside (0, 1e-3]")));
    }
    for (_, p) in params {
        p.zero_grad();
    }
    f()?.backward()?;
    let analytic: Vec<Vec<f64>> = params
        .iter()
        .map(|(_, p)| p.grad().unwrap_or_else(|| vec![0.0; p.len()]))
        .collect();
    for (_, p) in params {
        p.zero_grad();
    }

    let mut report = GradCheckReport {
        step,
        tolerance,
        params: Vec::with_capacity(params.len()),
        max_rel_error: 0.0,
        passed: true,
    };
    for ((name, p), a) in params.iter().zip(&analytic) {
        let numeric = numeric_grad(p, step, &mut f)?;
        let mut entry = ParamGradError {
            name: name.clone(),
            max_rel_error: 0.0,
            max_abs_error: 0.0,
            worst_index: 0,
        };
        for (i, (av, nv)) in a.iter().zip(&numeric).enumerate() {
            let rel = relative_error(*av, *nv);
            let abs = (av - nv).abs();
            if rel > entry.max_rel_error || rel.is_nan() {
                entry.max_rel_error = rel;
                entry.worst_index = i;
            }
            if abs > entry.max_abs_error || abs.is_nan() {
                entry.max_abs_error = abs;
            }
        }
        if entry.max_rel_error > report.max_rel_error || entry.max_rel_error.is_nan() {
            report.max_rel_error = entry.max_rel_error;
        }
        report.params.push(entry);
    }
    report.passed = report.max_rel_error.is_finite() && report.max_rel_error < tolerance;
    Ok(report)
}
