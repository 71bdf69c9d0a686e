pub mod analysis;
pub mod autodiff;
pub mod checkpoint;
pub mod cli;
pub mod datasets;
pub mod error;
pub mod matrix;
pub mod model;
pub mod odeint;
pub mod pipeline;
pub mod spectral;
pub mod trainer;

pub use error::{FodeError, Result};
pub use matrix::Matrix;
