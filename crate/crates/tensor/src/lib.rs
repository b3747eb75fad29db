//! Dense row-major tensors with reverse-mode automatic differentiation.
//!
//! The op set is deliberately small: element-wise arithmetic with
//! broadcasting, layout changes, batched matmul, direct grouped
//! convolution, softmax, layer normalization, bilinear resizing and global
//! average pooling. Every op checks its output for NaN/Inf and returns
//! [`TensorError::NonFinite`] instead of propagating it.
//!
//! Precision is a type parameter: `Tensor<f32>` for normal use and
//! `Tensor<f64>` for gradient checking against [`finite_diff_grad`].

mod element;
mod error;
pub mod gradcheck;
mod ops;
mod rng;
mod tensor;

pub use element::{DType, Real};
pub use error::{Result, TensorError};
pub use gradcheck::{check_op, finite_diff_grad, finite_diff_params, max_relative_error, op_suite};
pub use ops::{broadcast_shape, conv_out_len, gelu_derivative, gelu_scalar, Conv2dSpec};
pub use rng::RngState;
pub use tensor::{grad_enabled, no_grad, numel, strides, Tensor};
