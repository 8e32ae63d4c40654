//! Dense numeric kernels: matrices, probability vectors, losses, and the
//! linear / ReLU / two-layer building blocks with hand-derived gradients.
//!
//! All kernels are pure functions and generic over [`Real`], so the same
//! code backs `f32` training and `f64` gradient checks.

mod layers;
mod loss;
mod matrix;

pub use layers::{
    linear_backward, linear_forward, relu_backward, relu_forward, relu_mask, Linear, LinearGrads,
    Mlp, MlpForward, Parameters,
};
pub use loss::{
    cross_entropy, kl_divergence, log_softmax, mse, soft_cross_entropy, softmax, softmax_rows,
    LossGrad,
};
pub use matrix::{argmax, dot, DenseMatrix, ProbVec, Real};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum NumError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}
