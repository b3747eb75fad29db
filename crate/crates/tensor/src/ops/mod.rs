mod conv;
mod elementwise;
mod linalg;
mod nn;
mod reduce;
mod shape;

pub use conv::{conv_out_len, Conv2dSpec};
pub use elementwise::{broadcast_shape, gelu_derivative, gelu_scalar};
