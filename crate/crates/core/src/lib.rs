//! Log-polar classifiers with a learned origin.
//!
//! A fully convolutional origin predictor emits a heatmap whose centroid is
//! used as the origin of a differentiable log-polar resampling. In log-polar
//! coordinates rotations and dilations about the origin are translations, so
//! an ordinary convolutional classifier on the resampled image is equivariant
//! to them, and the learned origin removes translation.
//!
//! The numeric core is generic over [`Scalar`] (`f32` for training, `f64` for
//! gradient verification); the aliases below name the two instantiations.

pub mod autodiff;
pub mod datasets;
pub mod equivariance;
pub mod error;
pub mod network;
pub mod origin;
pub mod parallel;
pub mod sampler;
pub mod scalar;
pub mod tensor;
pub mod trainer;
pub mod verification;

pub use autodiff::{PaddingMode, Tape, Var};
pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Tape32 = Tape<f32>;
pub type Tape64 = Tape<f64>;
