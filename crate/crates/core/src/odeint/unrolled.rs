use crate::autodiff::{Tape, Var};
use crate::error::{FodeError, Result};
use crate::model::{vector_field, FodeModel, ModelVars};

use super::{Method, SolverConfig};

/// RK4 with every stage recorded on `tape`, so that `backward` through the
/// returned node differentiates the discrete solution exactly.
pub fn rk4_on_tape<F>(tape: &mut Tape, x0: Var, t0: f64, t1: f64, steps: usize, mut field: F) -> Result<Var>
where
    F: FnMut(&mut Tape, Var, f64) -> Result<Var>,
{
    if steps == 0 {
        return Err(FodeError::InvalidArgument("rk4 needs at least one step".into()));
    }
    let h = (t1 - t0) / steps as f64;
    let mut x = x0;
    for i in 0..steps {
        let t = t0 + i as f64 * h;
        let k1 = field(tape, x, t)?;
        let x2 = tape.lin_comb(&[(x, 1.0), (k1, h / 2.0)])?;
        let k2 = field(tape, x2, t + h / 2.0)?;
        let x3 = tape.lin_comb(&[(x, 1.0), (k2, h / 2.0)])?;
        let k3 = field(tape, x3, t + h / 2.0)?;
        let x4 = tape.lin_comb(&[(x, 1.0), (k3, h)])?;
        let k4 = field(tape, x4, t + h)?;
        x = tape.lin_comb(&[(x, 1.0), (k1, h / 6.0), (k2, h / 3.0), (k3, h / 3.0), (k4, h / 6.0)])?;
        if !tape.value(x).is_finite() {
            return Err(FodeError::NonFinite(format!("unrolled rk4 state at step {i}")));
        }
    }
    Ok(x)
}

/// Solves the model's field from the `B × (N·C)` batch `x0` with RK4 on
/// the tape. Returns the final-state node.
pub fn solve_with_grad_unrolled(
    tape: &mut Tape,
    model: &FodeModel,
    vars: &ModelVars,
    x0: Var,
    cfg: &SolverConfig,
) -> Result<Var> {
    cfg.validate()?;
    if cfg.method != Method::Rk4 {
        return Err(FodeError::InvalidArgument(
            "only fixed-step rk4 can be unrolled on the tape".into(),
        ));
    }
    rk4_on_tape(tape, x0, cfg.t0, cfg.t1, cfg.rk4_steps, |tape, x, t| {
        vector_field(tape, model, vars, x, t)
    })
}
