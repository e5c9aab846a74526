//! Minimal single-sample convolutional network with hand-written backprop.

mod layers;
mod skipnet;
mod tensor;

pub use layers::{HasParams, Param};
pub use skipnet::{max_depth, Adam, NetworkConfig, NetworkError, SkipNet};
pub use tensor::{Scalar, Tensor};
