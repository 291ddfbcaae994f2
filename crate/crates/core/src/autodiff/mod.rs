//! Dense `f64` tensors with a reverse-mode tape that can record its own
//! gradient computations, giving exact second derivatives through
//! gradient-descent steps.

mod error;
mod losses;
mod params;
mod tensor;

pub use error::TensorError;
pub use losses::{mse_loss, nll_loss};
pub use params::{finite_diff_grad, grad, max_relative_error, sgd_step, Gradients, ParamSet};
pub use tensor::{Elementwise, Graph, Reduce, Result, Tensor};

