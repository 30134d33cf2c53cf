//! Dense network substrate: matrices, MLPs with a manual backward pass,
//! softmax cross-entropy, an Adam optimizer and finite-difference checking.

mod adam;
pub mod gradcheck;
mod loss;
mod matrix;
mod mlp;

pub use adam::{Adam, AdamConfig};
pub use loss::{argmax, log_softmax, softmax_cross_entropy};
pub use matrix::Matrix;
pub use mlp::{Activation, Layer, Mlp, MlpGrads, Tape};
