//! Minimal reverse-mode automatic differentiation for small CNNs.

pub(crate) mod kernels;
pub mod gradcheck;
mod optim;
mod tape;
mod tensor;

pub use optim::{GradBuffer, Param, ParamSet, Sgd, SgdConfig};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

#[cfg(test)]
mod tests;
