//! End-to-end prediction: solve the field from the input window over
//! `[t0, t1]`, then apply the output filter (and, for classifiers, the
//! linear readout). Gradients come either from the unrolled RK4 tape or
//! from the adjoint solve.

use crate::autodiff::{Tape, Var};
use crate::error::{FodeError, Result};
use crate::matrix::Matrix;
use crate::model::{FodeModel, ModelVars};
use crate::odeint::{adjoint_grad, solve, solve_with_grad_unrolled, Method, SolverConfig};

/// Supervision for one batch.
#[derive(Debug, Clone, Copy)]
pub enum Targets<'a> {
    /// `B × (N·C)` target windows.
    Windows(&'a Matrix),
    Classes(&'a [usize]),
}

impl Targets<'_> {
    fn len(&self) -> usize {
        match self {
            Targets::Windows(m) => m.rows(),
            Targets::Classes(c) => c.len(),
        }
    }
}

fn check_batch(model: &FodeModel, x: &Matrix) -> Result<()> {
    if x.cols() != model.state_dim() {
        return Err(FodeError::shape("input batch width", model.state_dim(), x.cols()));
    }
    if x.rows() == 0 {
        return Err(FodeError::EmptyInput);
    }
    Ok(())
}

/// Final ODE states for a `B × (N·C)` batch, without the filter.
pub fn solve_batch(model: &FodeModel, x: &Matrix, cfg: &SolverConfig) -> Result<Matrix> {
    check_batch(model, x)?;
    Ok(solve(|t, s| model.field_batch(s, t), x, cfg)?.final_state)
}

/// Filter stage on a batch of final states; skipped (and `K` unread)
/// when the filter is disabled.
pub fn apply_output_filter(model: &FodeModel, x1: &Matrix) -> Result<Matrix> {
    if !model.config.use_filter {
        return Ok(x1.clone());
    }
    let k = model.filter_k.as_slice();
    let mut out = x1.clone();
    for r in 0..out.rows() {
        for (v, kv) in out.row_mut(r).iter_mut().zip(k) {
            *v *= kv;
        }
    }
    Ok(out)
}

/// Predicted windows for a `B × (N·C)` batch in model (normalised) units.
pub fn predict_batch(model: &FodeModel, x: &Matrix, cfg: &SolverConfig) -> Result<Matrix> {
    let x1 = solve_batch(model, x, cfg)?;
    apply_output_filter(model, &x1)
}

/// Predicts the next window for one raw `N × C` input, applying the
/// model's normaliser on the way in and out.
pub fn predict_window(model: &FodeModel, window: &Matrix, cfg: &SolverConfig) -> Result<Matrix> {
    window.ensure_shape("input window", model.window_len(), model.channels())?;
    let x = match &model.normalizer {
        Some(n) => n.normalize(window),
        None => window.clone(),
    };
    let flat = x.reshaped(1, model.state_dim())?;
    let pred = predict_batch(model, &flat, cfg)?.reshaped(model.window_len(), model.channels())?;
    Ok(match &model.normalizer {
        Some(n) => n.denormalize(&pred),
        None => pred,
    })
}

/// Class logits (`B × classes`) for a batch.
pub fn predict_logits(model: &FodeModel, x: &Matrix, cfg: &SolverConfig) -> Result<Matrix> {
    let Some(head) = &model.head else {
        return Err(FodeError::InvalidArgument("model has no classification head".into()));
    };
    let y = predict_batch(model, x, cfg)?;
    let (n, c) = (model.window_len(), model.channels());
    let mut logits = Matrix::zeros(y.rows(), head.w.rows());
    for r in 0..y.rows() {
        let row = y.row(r);
        let pooled: Vec<f64> = (0..n).map(|i| row[i * c..(i + 1) * c].iter().sum::<f64>() / c as f64).collect();
        for k in 0..head.w.rows() {
            logits[(r, k)] = head.b[(0, k)] + head.w.row(k).iter().zip(&pooled).map(|(w, p)| w * p).sum::<f64>();
        }
    }
    Ok(logits)
}

/// Records everything after the solve on `tape`: filter, optional head
/// and the mean loss. Returns the loss node.
fn loss_after_solve(tape: &mut Tape, model: &FodeModel, vars: &ModelVars, x1: Var, targets: Targets<'_>) -> Result<Var> {
    let y = if model.config.use_filter {
        tape.hadamard(x1, vars.k)?
    } else {
        x1
    };
    match (targets, vars.head) {
        (Targets::Windows(t), None) => tape.mse(y, t),
        (Targets::Classes(labels), Some((w, b))) => {
            let pooled = tape.group_mean(y, model.channels())?;
            let logits = tape.linear(pooled, w, b)?;
            tape.cross_entropy(logits, labels)
        }
        (Targets::Windows(_), Some(_)) => Err(FodeError::InvalidArgument(
            "classifier model given regression targets".into(),
        )),
        (Targets::Classes(_), None) => Err(FodeError::InvalidArgument(
            "class targets need a model with a classification head".into(),
        )),
    }
}

fn match_param_shapes(model: &FodeModel, grads: Vec<Matrix>) -> Result<Vec<Matrix>> {
    model
        .params()
        .iter()
        .zip(grads)
        .map(|(p, g)| g.reshaped(p.rows(), p.cols()))
        .collect()
}

/// Batch loss and its gradient for every tensor in `model.params()` order.
///
/// With `cfg.method == Rk4` the solve is unrolled on the tape; with
/// `Dopri5` the field gradients come from the adjoint solve at the same
/// tolerances.
pub fn loss_and_grads(model: &FodeModel, x: &Matrix, targets: Targets<'_>, cfg: &SolverConfig) -> Result<(f64, Vec<Matrix>)> {
    check_batch(model, x)?;
    if targets.len() != x.rows() {
        return Err(FodeError::shape("targets", x.rows(), targets.len()));
    }
    let one = Matrix::filled(1, 1, 1.0);
    let mut tape = Tape::new();
    let vars = model.register(&mut tape)?;
    match cfg.method {
        Method::Rk4 => {
            let x0 = tape.leaf(x.clone());
            let x1 = solve_with_grad_unrolled(&mut tape, model, &vars, x0, cfg)?;
            let loss = loss_after_solve(&mut tape, model, &vars, x1, targets)?;
            let g = tape.backward(loss, &one)?;
            let grads = vars.params().into_iter().map(|v| g.wrt(&tape, v)).collect();
            Ok((tape.value(loss)[(0, 0)], match_param_shapes(model, grads)?))
        }
        Method::Dopri5 => {
            let x1_val = solve_batch(model, x, cfg)?;
            let x1 = tape.leaf(x1_val.clone());
            let loss = loss_after_solve(&mut tape, model, &vars, x1, targets)?;
            let g = tape.backward(loss, &one)?;
            let adj = adjoint_grad(model, x, &x1_val, &g.wrt(&tape, x1), cfg)?;
            let mut grads = adj.mlp;
            grads.extend(vars.params()[6..].iter().map(|&v| g.wrt(&tape, v)));
            Ok((tape.value(loss)[(0, 0)], match_param_shapes(model, grads)?))
        }
    }
}

/// Batch loss only, without building gradients.
pub fn batch_loss(model: &FodeModel, x: &Matrix, targets: Targets<'_>, cfg: &SolverConfig) -> Result<f64> {
    check_batch(model, x)?;
    let x1_val = solve_batch(model, x, cfg)?;
    let mut tape = Tape::new();
    let vars = model.register(&mut tape)?;
    let x1 = tape.leaf(x1_val);
    let loss = loss_after_solve(&mut tape, model, &vars, x1, targets)?;
    Ok(tape.value(loss)[(0, 0)])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{FieldKind, ModelConfig};

    #[test]
    fn disabled_filter_never_reads_k() {
        let cfg = ModelConfig {
            use_filter: false,
            ..ModelConfig::forecasting(FieldKind::Fode, 6, 2)
        };
        let m = FodeModel::new(cfg, 3).unwrap();
        let mut poisoned = m.clone();
        poisoned.filter_k = Matrix::filled(6, 2, f64::NAN);
        let x = Matrix::from_fn(2, 12, |r, c| ((r * 12 + c) as f64).sin());
        let sc = SolverConfig::rk4(4);
        let (a, b) = (predict_batch(&m, &x, &sc).unwrap(), predict_batch(&poisoned, &x, &sc).unwrap());
        assert_eq!(a, b);
        let t = Matrix::zeros(2, 12);
        let (la, ga) = loss_and_grads(&m, &x, Targets::Windows(&t), &sc).unwrap();
        let (lb, gb) = loss_and_grads(&poisoned, &x, Targets::Windows(&t), &sc).unwrap();
        assert_eq!(la.to_bits(), lb.to_bits());
        assert_eq!(ga[..6], gb[..6]);
        assert!(ga[6].as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn targets_must_match_batch() {
        let m = FodeModel::new(ModelConfig::forecasting(FieldKind::Fode, 4, 1), 0).unwrap();
        let x = Matrix::zeros(2, 4);
        let t = Matrix::zeros(3, 4);
        assert!(loss_and_grads(&m, &x, Targets::Windows(&t), &SolverConfig::rk4(2)).is_err());
        assert!(loss_and_grads(&m, &x, Targets::Classes(&[0, 1]), &SolverConfig::rk4(2)).is_err());
    }

    #[test]
    fn logits_match_tape_head() {
        let cfg = ModelConfig {
            classes: Some(3),
            ..ModelConfig::forecasting(FieldKind::Fode, 8, 2)
        };
        let m = FodeModel::new(cfg, 9).unwrap();
        let x = Matrix::from_fn(4, 16, |r, c| ((r + 2 * c) as f64 * 0.3).cos());
        let sc = SolverConfig::rk4(4);
        let logits = predict_logits(&m, &x, &sc).unwrap();
        assert_eq!(logits.shape(), (4, 3));
        let labels = [0usize, 2, 1, 1];
        let loss = batch_loss(&m, &x, Targets::Classes(&labels), &sc).unwrap();
        let mut manual = 0.0;
        for (r, &l) in labels.iter().enumerate() {
            let row = logits.row(r);
            let mx = row.iter().cloned().fold(f64::MIN, f64::max);
            let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
            manual += lse - row[l];
        }
        assert!((loss - manual / 4.0).abs() < 1e-12);
    }
}
