//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! Built for small CPU-resident convolutional networks: NCHW convolutions,
//! pooling, interpolation and the usual elementwise/reduction ops, with
//! backward rules that are themselves differentiable.

pub mod gradcheck;
pub mod kernels;
mod ops;
pub mod optim;
pub mod params;
pub mod tensor;
pub mod var;

pub use ops::{interp_matrix, softplus_scalar};
pub use optim::{Adam, AdamConfig};
pub use params::{Bind, ParamStore};
pub use tensor::Tensor;
pub use var::{grad, grad_with_seed, no_grad, Var};
