//! Dormand–Prince 5(4) with PI step-size control.

use super::{check_field_shape, combine, SolveResult};
use crate::error::{FodeError, Result};
use crate::matrix::Matrix;

const C2: f64 = 1.0 / 5.0;
const C3: f64 = 3.0 / 10.0;
const C4: f64 = 4.0 / 5.0;
const C5: f64 = 8.0 / 9.0;

const A21: f64 = 1.0 / 5.0;
const A31: f64 = 3.0 / 40.0;
const A32: f64 = 9.0 / 40.0;
const A41: f64 = 44.0 / 45.0;
const A42: f64 = -56.0 / 15.0;
const A43: f64 = 32.0 / 9.0;
const A51: f64 = 19372.0 / 6561.0;
const A52: f64 = -25360.0 / 2187.0;
const A53: f64 = 64448.0 / 6561.0;
const A54: f64 = -212.0 / 729.0;
const A61: f64 = 9017.0 / 3168.0;
const A62: f64 = -355.0 / 33.0;
const A63: f64 = 46732.0 / 5247.0;
const A64: f64 = 49.0 / 176.0;
const A65: f64 = -5103.0 / 18656.0;
const A71: f64 = 35.0 / 384.0;
const A73: f64 = 500.0 / 1113.0;
const A74: f64 = 125.0 / 192.0;
const A75: f64 = -2187.0 / 6784.0;
const A76: f64 = 11.0 / 84.0;

// Fifth-order weights minus embedded fourth-order weights.
const E1: f64 = 71.0 / 57600.0;
const E3: f64 = -71.0 / 16695.0;
const E4: f64 = 71.0 / 1920.0;
const E5: f64 = -17253.0 / 339200.0;
const E6: f64 = 22.0 / 525.0;
const E7: f64 = -1.0 / 40.0;

const BETA: f64 = 0.04;
const ALPHA: f64 = 0.2 - 0.75 * BETA;
const SAFETY: f64 = 0.9;
const FAC_MIN: f64 = 0.2;
const FAC_MAX: f64 = 10.0;

fn rms_norm(v: &[f64], scale: impl Fn(usize) -> f64) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    let s: f64 = v.iter().enumerate().map(|(i, e)| (e / scale(i)).powi(2)).sum();
    (s / v.len() as f64).sqrt()
}

#[allow(clippy::too_many_arguments)]
fn initial_step<F>(
    field: &mut F,
    t0: f64,
    x0: &Matrix,
    f0: &Matrix,
    dir: f64,
    span: f64,
    rtol: f64,
    atol: f64,
) -> Result<f64>
where
    F: FnMut(f64, &Matrix) -> Result<Matrix>,
{
    let x = x0.as_slice();
    let sc = |i: usize| atol + rtol * x[i].abs();
    let d0 = rms_norm(x, sc);
    let d1 = rms_norm(f0.as_slice(), sc);
    let h0 = if d0 < 1e-5 || d1 < 1e-5 { 1e-6 } else { 0.01 * d0 / d1 };
    let x1 = combine(x0, &[(dir * h0, f0)]);
    let f1 = field(t0 + dir * h0, &x1)?;
    let diff: Vec<f64> = f1.as_slice().iter().zip(f0.as_slice()).map(|(a, b)| a - b).collect();
    let d2 = rms_norm(&diff, sc) / h0;
    if d1.max(d2) == 0.0 {
        // Locally constant solution: try the whole interval.
        return Ok(span);
    }
    let h1 = if d1.max(d2) <= 1e-15 {
        (h0 * 1e-3).max(1e-6)
    } else {
        (0.01 / d1.max(d2)).powf(1.0 / 5.0)
    };
    Ok((100.0 * h0).min(h1))
}

/// Adaptive Dormand–Prince 5(4). Works in either time direction.
///
/// The error norm is the RMS of `err_i / (atol + rtol·max(|x_i|, |x̃_i|))`
/// over old and new states; steps with norm ≤ 1 are accepted.
pub fn dopri5_solve<F>(
    mut field: F,
    x0: &Matrix,
    t0: f64,
    t1: f64,
    rtol: f64,
    atol: f64,
    max_steps: usize,
) -> Result<SolveResult>
where
    F: FnMut(f64, &Matrix) -> Result<Matrix>,
{
    if !(rtol > 0.0 && atol > 0.0) {
        return Err(FodeError::InvalidArgument("tolerances must be > 0".into()));
    }
    if !x0.is_finite() {
        return Err(FodeError::NonFinite("dopri5 initial state".into()));
    }
    let span = t1 - t0;
    let mut result = SolveResult {
        final_state: x0.clone(),
        n_field_evals: 0,
        n_accepted: 0,
        n_rejected: 0,
        max_error_norm: 0.0,
        trajectory: None,
    };
    if span == 0.0 {
        return Ok(result);
    }
    let dir = span.signum();
    let min_step = 1e-14 * span.abs();

    let mut x = x0.clone();
    let mut t = t0;
    let mut k1 = field(t, &x)?;
    check_field_shape(&x, &k1)?;
    let mut h = initial_step(&mut field, t, &x, &k1, dir, span.abs(), rtol, atol)?;
    result.n_field_evals += 2;
    let mut err_prev = 1e-4f64;
    let mut just_rejected = false;
    let mut attempts = 0usize;

    loop {
        let remaining = (t1 - t).abs();
        if remaining <= 0.0 {
            break;
        }
        if attempts >= max_steps {
            return Err(FodeError::MaxStepsExceeded(max_steps));
        }
        attempts += 1;
        let last = h >= remaining - min_step;
        if last {
            h = remaining;
        }
        if h < min_step {
            return Err(FodeError::StepUnderflow { t, h });
        }
        let hs = dir * h;

        let k2 = field(t + C2 * hs, &combine(&x, &[(hs * A21, &k1)]))?;
        let k3 = field(t + C3 * hs, &combine(&x, &[(hs * A31, &k1), (hs * A32, &k2)]))?;
        let k4 = field(
            t + C4 * hs,
            &combine(&x, &[(hs * A41, &k1), (hs * A42, &k2), (hs * A43, &k3)]),
        )?;
        let k5 = field(
            t + C5 * hs,
            &combine(&x, &[(hs * A51, &k1), (hs * A52, &k2), (hs * A53, &k3), (hs * A54, &k4)]),
        )?;
        let k6 = field(
            t + hs,
            &combine(
                &x,
                &[(hs * A61, &k1), (hs * A62, &k2), (hs * A63, &k3), (hs * A64, &k4), (hs * A65, &k5)],
            ),
        )?;
        let x_new = combine(
            &x,
            &[(hs * A71, &k1), (hs * A73, &k3), (hs * A74, &k4), (hs * A75, &k5), (hs * A76, &k6)],
        );
        let t_new = if last { t1 } else { t + hs };
        let k7 = field(t_new, &x_new)?;
        result.n_field_evals += 6;

        let err_vec: Vec<f64> = (0..x.len())
            .map(|i| {
                let g = |k: &Matrix| k.as_slice()[i];
                hs * (E1 * g(&k1) + E3 * g(&k3) + E4 * g(&k4) + E5 * g(&k5) + E6 * g(&k6) + E7 * g(&k7))
            })
            .collect();
        let (xo, xn) = (x.as_slice(), x_new.as_slice());
        let err = rms_norm(&err_vec, |i| atol + rtol * xo[i].abs().max(xn[i].abs()));

        if err.is_finite() && err <= 1.0 {
            let err = err.max(1e-10);
            let mut fac = SAFETY * err.powf(-ALPHA) * err_prev.powf(BETA);
            fac = fac.clamp(FAC_MIN, FAC_MAX);
            if just_rejected {
                fac = fac.min(1.0);
            }
            result.max_error_norm = result.max_error_norm.max(err.min(1.0));
            debug_assert!(result.max_error_norm <= 1.0);
            err_prev = err;
            just_rejected = false;
            result.n_accepted += 1;
            x = x_new;
            k1 = k7;
            t = t_new;
            if last {
                break;
            }
            h *= fac;
        } else {
            let fac = if err.is_finite() {
                (SAFETY * err.powf(-ALPHA)).clamp(FAC_MIN, 1.0)
            } else {
                FAC_MIN
            };
            h *= fac;
            just_rejected = true;
            result.n_rejected += 1;
        }
    }
    if !x.is_finite() {
        return Err(FodeError::NonFinite("dopri5 final state".into()));
    }
    result.final_state = x;
    Ok(result)
}
