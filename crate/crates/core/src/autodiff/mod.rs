//! Reverse-mode differentiation, the ReLU perceptron, finite-difference
//! checking and the Adam optimizer.

mod adam;
mod gradcheck;
mod mlp;
mod tape;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use gradcheck::{grad_check, GradCheckReport};
pub use mlp::{mlp_forward, xavier_uniform, MlpParams, MlpVars};
pub use tape::{Gradients, RowLinearMap, Tape, Var};
