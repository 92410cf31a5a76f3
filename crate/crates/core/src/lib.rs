//! Ternary-weight neural networks.
//!
//! Full-precision master weights are quantized to `{-α, 0, +α}` with a
//! threshold derived from each layer's largest weight magnitude, trained
//! through a clipped straight-through estimator, optionally expanded into
//! several ternary branches at increasing thresholds, and executed with a
//! multiplication-free packed kernel.
//!
//! Numeric code is generic over [`Scalar`] (`f32` and `f64`); the aliases
//! below name the two concrete instantiations.

pub mod analysis;
pub mod autodiff;
pub mod error;
pub mod exec;
pub mod io;
pub mod model;
pub mod ops;
pub mod optim;
pub mod rel;
pub mod scalar;
pub mod tensor;
pub mod ternarize;
pub mod train;

pub use error::{Result, TernError};
pub use scalar::Scalar;
pub use tensor::Tensor;
pub use ternarize::{TernaryTensor, ThresholdSpec};

/// Production precision.
pub type Tensor32 = Tensor<f32>;
/// Gradient-check precision.
pub type Tensor64 = Tensor<f64>;
pub type TernaryTensor32 = TernaryTensor<f32>;
