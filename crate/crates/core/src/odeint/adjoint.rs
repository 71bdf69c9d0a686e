use crate::autodiff::Tape;
use crate::error::{FodeError, Result};
use crate::matrix::Matrix;
use crate::model::{vector_field, FodeModel};

use super::{dopri5_solve, rk4_solve, Method, SolverConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct AdjointGradients {
    /// Perceptron gradients in `MlpParams::tensors` order.
    pub mlp: Vec<Matrix>,
    /// Gradient with respect to the initial state, same shape as `x0`.
    pub x0: Matrix,
    /// Max deviation between the state recovered at `t0` by the backward
    /// solve and the true `x0`.
    pub reconstruction_error: f64,
    pub n_field_evals: usize,
}

/// Gradients of a loss on `x(t1)` by integrating the augmented system
/// `(x, a, g)` from `t1` back to `t0`, where `a = ∂L/∂x` and `g`
/// accumulates `∫ aᵀ ∂f/∂θ dt`. The solver follows `cfg.method`.
///
/// `x0`, `x1` and `loss_grad_at_t1` are `B × (N·C)` batches. The filter is
/// not part of the field, so its gradient is left to the caller.
pub fn adjoint_grad(
    model: &FodeModel,
    x0: &Matrix,
    x1: &Matrix,
    loss_grad_at_t1: &Matrix,
    cfg: &SolverConfig,
) -> Result<AdjointGradients> {
    cfg.validate()?;
    if x1.shape() != x0.shape() || loss_grad_at_t1.shape() != x0.shape() {
        return Err(FodeError::shape(
            "adjoint inputs",
            format!("{:?}", x0.shape()),
            format!("{:?} / {:?}", x1.shape(), loss_grad_at_t1.shape()),
        ));
    }
    let (rows, cols) = x0.shape();
    let n_state = rows * cols;
    let shapes: Vec<(usize, usize)> = model.mlp.tensors().iter().map(|t| t.shape()).collect();
    let n_param: usize = shapes.iter().map(|(r, c)| r * c).sum();

    let mut aug = Vec::with_capacity(2 * n_state + n_param);
    aug.extend_from_slice(x1.as_slice());
    aug.extend_from_slice(loss_grad_at_t1.as_slice());
    aug.resize(2 * n_state + n_param, 0.0);
    let aug = Matrix::row_vector(aug);

    let dynamics = |t: f64, s: &Matrix| -> Result<Matrix> {
        let s = s.as_slice();
        let x = Matrix::from_vec(rows, cols, s[..n_state].to_vec())?;
        let a = Matrix::from_vec(rows, cols, s[n_state..2 * n_state].to_vec())?;
        let mut tape = Tape::new();
        let vars = model.register(&mut tape)?;
        let xv = tape.leaf(x);
        let f = vector_field(&mut tape, model, &vars, xv, t)?;
        let grads = tape.backward(f, &a)?;
        let mut out = Vec::with_capacity(s.len());
        out.extend_from_slice(tape.value(f).as_slice());
        out.extend(grads.wrt(&tape, xv).as_slice().iter().map(|v| -v));
        for v in vars.mlp.all() {
            out.extend(grads.wrt(&tape, v).as_slice().iter().map(|g| -g));
        }
        Ok(Matrix::row_vector(out))
    };

    let result = match cfg.method {
        Method::Rk4 => rk4_solve(dynamics, &aug, cfg.t1, cfg.t0, cfg.rk4_steps),
        Method::Dopri5 => dopri5_solve(dynamics, &aug, cfg.t1, cfg.t0, cfg.rtol, cfg.atol, cfg.max_steps),
    }
    .map_err(|e| match e {
        FodeError::NonFinite(m) => FodeError::NonFinite(format!("adjoint solve: {m}")),
        other => other,
    })?;

    let s = result.final_state.as_slice();
    let x_back = Matrix::from_vec(rows, cols, s[..n_state].to_vec())?;
    let g_x0 = Matrix::from_vec(rows, cols, s[n_state..2 * n_state].to_vec())?;
    let mut offset = 2 * n_state;
    let mut mlp = Vec::with_capacity(shapes.len());
    for (r, c) in shapes {
        mlp.push(Matrix::from_vec(r, c, s[offset..offset + r * c].to_vec())?);
        offset += r * c;
    }
    Ok(AdjointGradients {
        mlp,
        x0: g_x0,
        reconstruction_error: x_back.max_abs_diff(x0),
        n_field_evals: result.n_field_evals,
    })
}
