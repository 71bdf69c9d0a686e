use serde::Serialize;

use crate::error::{FodeError, Result};
use crate::matrix::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(tensor, element)` where the worst error occurred.
    pub worst: (usize, usize),
    pub n_checked: usize,
}

/// Compares analytic gradients against central differences over every
/// scalar parameter.
///
/// `loss_fn` returns the loss and its gradient (one matrix per tensor in
/// `params`). The relative error at each element is
/// `|g_ad − g_fd| / max(|g_ad|, |g_fd|, 1e-12)`.
pub fn grad_check<F>(mut loss_fn: F, params: &[Matrix], eps: f64) -> Result<GradCheckReport>
where
    F: FnMut(&[Matrix]) -> Result<(f64, Vec<Matrix>)>,
{
    if !(eps > 0.0) {
        return Err(FodeError::InvalidArgument("finite-difference step must be > 0".into()));
    }
    let (_, analytic) = loss_fn(params)?;
    if analytic.len() != params.len() {
        return Err(FodeError::shape("grad_check gradients", params.len(), analytic.len()));
    }

    let mut work: Vec<Matrix> = params.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        n_checked: 0,
    };
    for t in 0..params.len() {
        for e in 0..params[t].len() {
            let orig = params[t].as_slice()[e];
            work[t].as_mut_slice()[e] = orig + eps;
            let (plus, _) = loss_fn(&work)?;
            work[t].as_mut_slice()[e] = orig - eps;
            let (minus, _) = loss_fn(&work)?;
            work[t].as_mut_slice()[e] = orig;

            let fd = (plus - minus) / (2.0 * eps);
            let ad = analytic[t].as_slice()[e];
            let denom = ad.abs().max(fd.abs()).max(1e-12);
            let rel = (ad - fd).abs() / denom;
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = (t, e);
            }
            report.n_checked += 1;
        }
    }
    Ok(report)
}
