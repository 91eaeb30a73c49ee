//! Tensors, probability rows, random streams, autodiff and optimization.

pub mod autograd;
pub mod optim;
pub mod prob;
pub mod rng;
pub mod tensor;

pub use autograd::{Gradients, Tape, Var};
pub use optim::Adam;
pub use prob::{entropy, kl_divergence, nucleus, softmax_row, tempered_row, ProbRow, MASKED_LOGIT, PROB_FLOOR};
pub use rng::{sample_categorical, RngStream};
pub use tensor::Tensor;
