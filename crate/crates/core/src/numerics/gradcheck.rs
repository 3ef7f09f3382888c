//! Central-difference gradient certification.

use crate::error::{config_err, dim_err, numeric_err, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// Coordinate attaining `max_rel_err`.
    pub worst_index: usize,
    pub checked: usize,
}

/// Relative error used throughout: `|a − fd| / max(|a|, |fd|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares `analytic` against central differences of `f` at `params`, over
/// every coordinate.
pub fn grad_check<F>(f: F, analytic: &[f64], params: &[f64], eps: f64) -> Result<GradCheckReport>
where
    F: FnMut(&[f64]) -> f64,
{
    let all: Vec<usize> = (0..params.len()).collect();
    grad_check_subset(f, analytic, params, &all, eps)
}

/// Like [`grad_check`] but only perturbs the listed coordinates.
pub fn grad_check_subset<F>(
    mut f: F,
    analytic: &[f64],
    params: &[f64],
    indices: &[usize],
    eps: f64,
) -> Result<GradCheckReport>
where
    F: FnMut(&[f64]) -> f64,
{
    if !(eps > 0.0) {
        return Err(config_err!("finite-difference step must be positive, got {eps}"));
    }
    if analytic.len() != params.len() {
        return Err(dim_err!(
            "{} analytic gradients for {} parameters",
            analytic.len(),
            params.len()
        ));
    }
    let base = f(params);
    if !base.is_finite() {
        return Err(numeric_err!("loss is non-finite at the check point"));
    }
    let mut p = params.to_vec();
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_index: 0,
        checked: 0,
    };
    for &i in indices {
        let orig = p[i];
        p[i] = orig + eps;
        let plus = f(&p);
        p[i] = orig - eps;
        let minus = f(&p);
        p[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(numeric_err!("loss became non-finite perturbing coordinate {i}"));
        }
        let fd = (plus - minus) / (2.0 * eps);
        let err = relative_error(analytic[i], fd);
        if err > report.max_rel_err {
            report.max_rel_err = err;
            report.worst_index = i;
        }
        report.checked += 1;
    }
    Ok(report)
}
