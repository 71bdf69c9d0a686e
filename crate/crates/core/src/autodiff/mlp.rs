//! Three-layer ReLU perceptron: `(F_in, H) → (H, H) → (H, F_out)`.

use rand::Rng;

use super::tape::{Tape, Var};
use crate::error::{FodeError, Result};
use crate::matrix::Matrix;

#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    pub w1: Matrix,
    pub b1: Matrix,
    pub w2: Matrix,
    pub b2: Matrix,
    pub w3: Matrix,
    pub b3: Matrix,
}

/// Xavier-uniform `out × in` weight matrix.
pub fn xavier_uniform(out_dim: usize, in_dim: usize, rng: &mut impl Rng) -> Matrix {
    let bound = (6.0 / (in_dim + out_dim) as f64).sqrt();
    Matrix::from_fn(out_dim, in_dim, |_, _| rng.gen_range(-bound..bound))
}

impl MlpParams {
    pub fn zeros(f_in: usize, hidden: usize, f_out: usize) -> Self {
        MlpParams {
            w1: Matrix::zeros(hidden, f_in),
            b1: Matrix::zeros(1, hidden),
            w2: Matrix::zeros(hidden, hidden),
            b2: Matrix::zeros(1, hidden),
            w3: Matrix::zeros(f_out, hidden),
            b3: Matrix::zeros(1, f_out),
        }
    }

    /// Xavier-uniform weights, zero biases.
    pub fn xavier(f_in: usize, hidden: usize, f_out: usize, rng: &mut impl Rng) -> Self {
        MlpParams {
            w1: xavier_uniform(hidden, f_in, rng),
            b1: Matrix::zeros(1, hidden),
            w2: xavier_uniform(hidden, hidden, rng),
            b2: Matrix::zeros(1, hidden),
            w3: xavier_uniform(f_out, hidden, rng),
            b3: Matrix::zeros(1, f_out),
        }
    }

    /// Identity weights with the first bias shifted by `shift` and the last
    /// by `−shift`: the network is exactly the identity on inputs whose
    /// entries are all `≥ −shift`, and every weight matrix has spectral
    /// norm 1.
    pub fn shifted_identity(features: usize, shift: f64) -> Self {
        MlpParams {
            w1: Matrix::identity(features),
            b1: Matrix::filled(1, features, shift),
            w2: Matrix::identity(features),
            b2: Matrix::zeros(1, features),
            w3: Matrix::identity(features),
            b3: Matrix::filled(1, features, -shift),
        }
    }

    pub fn f_in(&self) -> usize {
        self.w1.cols()
    }

    pub fn hidden(&self) -> usize {
        self.w1.rows()
    }

    pub fn f_out(&self) -> usize {
        self.w3.rows()
    }

    pub fn validate(&self) -> Result<()> {
        let (fi, h, fo) = (self.f_in(), self.hidden(), self.f_out());
        self.b1.ensure_shape("mlp b1", 1, h)?;
        self.w2.ensure_shape("mlp w2", h, h)?;
        self.b2.ensure_shape("mlp b2", 1, h)?;
        self.w3.ensure_shape("mlp w3", fo, h)?;
        self.b3.ensure_shape("mlp b3", 1, fo)?;
        self.w1.ensure_shape("mlp w1", h, fi)?;
        if !self.tensors().iter().all(|t| t.is_finite()) {
            return Err(FodeError::NonFinite("mlp parameters".into()));
        }
        Ok(())
    }

    pub fn tensors(&self) -> [&Matrix; 6] {
        [&self.w1, &self.b1, &self.w2, &self.b2, &self.w3, &self.b3]
    }

    pub fn tensors_mut(&mut self) -> [&mut Matrix; 6] {
        [
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
            &mut self.w3,
            &mut self.b3,
        ]
    }

    pub fn register(&self, tape: &mut Tape) -> MlpVars {
        MlpVars {
            w1: tape.leaf(self.w1.clone()),
            b1: tape.leaf(self.b1.clone()),
            w2: tape.leaf(self.w2.clone()),
            b2: tape.leaf(self.b2.clone()),
            w3: tape.leaf(self.w3.clone()),
            b3: tape.leaf(self.b3.clone()),
        }
    }
}

/// Tape handles of a registered [`MlpParams`].
#[derive(Debug, Clone, Copy)]
pub struct MlpVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
    pub w3: Var,
    pub b3: Var,
}

impl MlpVars {
    pub fn all(&self) -> [Var; 6] {
        [self.w1, self.b1, self.w2, self.b2, self.w3, self.b3]
    }

    /// `W3·relu(W2·relu(W1·x + b1) + b2) + b3`, row-wise over the batch.
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let h1 = tape.linear(x, self.w1, self.b1)?;
        let a1 = tape.relu(h1);
        let h2 = tape.linear(a1, self.w2, self.b2)?;
        let a2 = tape.relu(h2);
        tape.linear(a2, self.w3, self.b3)
    }
}

/// Registers `params` on `tape` and runs them on `input` (`batch × F_in`).
pub fn mlp_forward(params: &MlpParams, input: &Matrix, tape: &mut Tape) -> Result<(MlpVars, Var, Var)> {
    if input.cols() != params.f_in() {
        return Err(FodeError::shape("mlp input", params.f_in(), input.cols()));
    }
    let vars = params.register(tape);
    let x = tape.leaf(input.clone());
    let y = vars.forward(tape, x)?;
    Ok((vars, x, y))
}
