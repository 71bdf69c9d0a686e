//! Initial-value solvers and gradient paths through them.
//!
//! States are matrices of any shape; solvers treat them as flat vectors.
//! A field is any `FnMut(t, &x) -> Result<dx/dt>`.

mod adjoint;
mod dopri5;
mod unrolled;

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{FodeError, Result};
use crate::matrix::Matrix;

pub use adjoint::{adjoint_grad, AdjointGradients};
pub use dopri5::dopri5_solve;
pub use unrolled::{rk4_on_tape, solve_with_grad_unrolled};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Rk4,
    Dopri5,
}

impl FromStr for Method {
    type Err = FodeError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rk4" => Ok(Method::Rk4),
            "dopri5" => Ok(Method::Dopri5),
            _ => Err(FodeError::UnknownVariant {
                kind: "solver",
                value: s.into(),
            }),
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Rk4 => "rk4",
            Method::Dopri5 => "dopri5",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    pub method: Method,
    pub rk4_steps: usize,
    pub rtol: f64,
    pub atol: f64,
    pub max_steps: usize,
    pub t0: f64,
    pub t1: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            method: Method::Dopri5,
            rk4_steps: 8,
            rtol: 1e-6,
            atol: 1e-8,
            max_steps: 10_000,
            t0: 0.0,
            t1: 1.0,
        }
    }
}

impl SolverConfig {
    pub fn rk4(steps: usize) -> Self {
        SolverConfig {
            method: Method::Rk4,
            rk4_steps: steps,
            ..Self::default()
        }
    }

    pub fn dopri5(rtol: f64, atol: f64) -> Self {
        SolverConfig {
            method: Method::Dopri5,
            rtol,
            atol,
            ..Self::default()
        }
    }

    pub fn with_span(self, t0: f64, t1: f64) -> Self {
        SolverConfig { t0, t1, ..self }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.rtol > 0.0 && self.atol > 0.0) {
            return Err(FodeError::InvalidArgument("tolerances must be > 0".into()));
        }
        if self.rk4_steps == 0 || self.max_steps == 0 {
            return Err(FodeError::InvalidArgument(
                "rk4_steps and max_steps must be >= 1".into(),
            ));
        }
        if !(self.t1 > self.t0) || !self.t0.is_finite() || !self.t1.is_finite() {
            return Err(FodeError::InvalidArgument("need finite t0 < t1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolveResult {
    pub final_state: Matrix,
    pub n_field_evals: usize,
    pub n_accepted: usize,
    pub n_rejected: usize,
    /// Largest error norm of any accepted adaptive step (0 for RK4).
    pub max_error_norm: f64,
    /// `(t, state)` samples, when requested.
    pub trajectory: Option<Vec<(f64, Matrix)>>,
}

/// `out = x + Σ cᵢ·kᵢ`, element-wise over flat storage.
pub(crate) fn combine(x: &Matrix, terms: &[(f64, &Matrix)]) -> Matrix {
    let mut out = x.clone();
    for (c, k) in terms {
        if *c != 0.0 {
            out.axpy(*c, k);
        }
    }
    out
}

fn check_field_shape(x: &Matrix, dx: &Matrix) -> Result<()> {
    if x.shape() != dx.shape() {
        return Err(FodeError::shape(
            "field output",
            format!("{:?}", x.shape()),
            format!("{:?}", dx.shape()),
        ));
    }
    Ok(())
}

/// Classical fourth-order Runge–Kutta with `steps` uniform steps.
pub fn rk4_solve<F>(mut field: F, x0: &Matrix, t0: f64, t1: f64, steps: usize) -> Result<SolveResult>
where
    F: FnMut(f64, &Matrix) -> Result<Matrix>,
{
    if steps == 0 {
        return Err(FodeError::InvalidArgument("rk4 needs at least one step".into()));
    }
    let h = (t1 - t0) / steps as f64;
    let mut x = x0.clone();
    for i in 0..steps {
        let t = t0 + i as f64 * h;
        let k1 = field(t, &x)?;
        check_field_shape(&x, &k1)?;
        let k2 = field(t + h / 2.0, &combine(&x, &[(h / 2.0, &k1)]))?;
        let k3 = field(t + h / 2.0, &combine(&x, &[(h / 2.0, &k2)]))?;
        let k4 = field(t + h, &combine(&x, &[(h, &k3)]))?;
        x = combine(&x, &[(h / 6.0, &k1), (h / 3.0, &k2), (h / 3.0, &k3), (h / 6.0, &k4)]);
        if !x.is_finite() {
            return Err(FodeError::NonFinite(format!("rk4 state at step {i}, t={}", t + h)));
        }
    }
    Ok(SolveResult {
        final_state: x,
        n_field_evals: 4 * steps,
        n_accepted: steps,
        n_rejected: 0,
        max_error_norm: 0.0,
        trajectory: None,
    })
}

/// Solves over `[cfg.t0, cfg.t1]` with the configured method.
pub fn solve<F>(field: F, x0: &Matrix, cfg: &SolverConfig) -> Result<SolveResult>
where
    F: FnMut(f64, &Matrix) -> Result<Matrix>,
{
    cfg.validate()?;
    match cfg.method {
        Method::Rk4 => rk4_solve(field, x0, cfg.t0, cfg.t1, cfg.rk4_steps),
        Method::Dopri5 => dopri5_solve(field, x0, cfg.t0, cfg.t1, cfg.rtol, cfg.atol, cfg.max_steps),
    }
}

/// Solves segment by segment through the increasing sample `times`
/// (the first of which is the initial time) and records the state at each.
/// RK4 spreads `cfg.rk4_steps` over every segment.
pub fn solve_sampled<F>(mut field: F, x0: &Matrix, times: &[f64], cfg: &SolverConfig) -> Result<SolveResult>
where
    F: FnMut(f64, &Matrix) -> Result<Matrix>,
{
    let Some(&first) = times.first() else {
        return Err(FodeError::EmptyInput);
    };
    if times.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(FodeError::InvalidArgument("sample times must increase".into()));
    }
    let mut traj = vec![(first, x0.clone())];
    let mut x = x0.clone();
    let (mut evals, mut acc, mut rej, mut max_err) = (0, 0, 0, 0.0f64);
    for w in times.windows(2) {
        let seg = cfg.with_span(w[0], w[1]);
        let r = solve(&mut field, &x, &seg)?;
        evals += r.n_field_evals;
        acc += r.n_accepted;
        rej += r.n_rejected;
        max_err = max_err.max(r.max_error_norm);
        x = r.final_state;
        traj.push((w[1], x.clone()));
    }
    Ok(SolveResult {
        final_state: x,
        n_field_evals: evals,
        n_accepted: acc,
        n_rejected: rej,
        max_error_norm: max_err,
        trajectory: Some(traj),
    })
}

/// Writes `N × C` trajectory samples as `t,channel,step_index,value`
/// rows, where `step_index` is the row of the state window.
pub fn write_trajectory_csv<W: Write>(mut w: W, trajectory: &[(f64, Matrix)]) -> std::io::Result<()> {
    writeln!(w, "t,channel,step_index,value")?;
    for (t, x) in trajectory {
        for c in 0..x.cols() {
            for n in 0..x.rows() {
                writeln!(w, "{t},{c},{n},{}", x[(n, c)])?;
            }
        }
    }
    Ok(())
}
