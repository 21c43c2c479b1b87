//! Dense math, differentiable layers, losses and optimizers.

mod gradcheck;
mod layers;
mod loss;
mod optim;
mod params;
mod rng;
mod tensor;

pub use gradcheck::{finite_diff_grad, max_relative_error};
pub use layers::{Activation, Layer, Linear, ResidualBlock, Sequential, Tape};
pub use loss::{
    cross_entropy, cross_entropy_rows, log_sigmoid, mse, mse_rows, sigmoid, softmax,
    softmax_rows, LossOutput, RowLosses,
};
pub use optim::{adam_step, lr_at_epoch, AdamState};
pub use params::Parameters;
pub(crate) use params::join;
pub use rng::{stream_rng, streams, SeededRng};
pub use tensor::Tensor2;
