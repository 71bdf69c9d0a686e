use serde::{Deserialize, Serialize};

use crate::error::{FodeError, Result};
use crate::matrix::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment accumulators, one per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Matrix>,
    pub v: Vec<Matrix>,
    pub step_count: u64,
}

impl AdamState {
    pub fn new(params: &[&Matrix]) -> Self {
        let zeros = || params.iter().map(|p| Matrix::zeros(p.rows(), p.cols())).collect();
        AdamState {
            m: zeros(),
            v: zeros(),
            step_count: 0,
        }
    }
}

/// One bias-corrected Adam update, in place.
pub fn adam_step(
    params: &mut [&mut Matrix],
    grads: &[Matrix],
    state: &mut AdamState,
    cfg: &AdamConfig,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(FodeError::shape(
            "adam tensor count",
            state.m.len(),
            format!("{} params / {} grads", params.len(), grads.len()),
        ));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || p.shape() != state.m[i].shape() {
            return Err(FodeError::shape(
                "adam tensor",
                format!("{:?}", p.shape()),
                format!("{:?}", g.shape()),
            ));
        }
    }
    if !(0.0..1.0).contains(&cfg.beta1) || !(0.0..1.0).contains(&cfg.beta2) {
        return Err(FodeError::InvalidArgument("Adam betas must lie in [0, 1)".into()));
    }

    state.step_count += 1;
    let t = state.step_count as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for ((p, g), (m, v)) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        let p = p.as_mut_slice();
        let (m, v) = (m.as_mut_slice(), v.as_mut_slice());
        for (j, &gj) in g.as_slice().iter().enumerate() {
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * gj;
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * gj * gj;
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            p[j] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}
