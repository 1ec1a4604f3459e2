//! Real-time single-image super-resolution.
//!
//! The crate bundles a residual feature network with tanh refinement and
//! efficient channel attention, the Charbonnier + perceptual + Sobel training
//! objective, a small reverse-mode autodiff engine to train it, and the
//! evaluation tooling around it: PSNR/SSIM/SI/TI metrics, FPS measurement,
//! Bradley–Terry ranking of pairwise preferences, and dataset curation.
//!
//! Numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below fix the precision for the common cases.

pub mod bench;
pub mod dataset;
pub mod error;
pub mod io;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod ranking;
pub mod scalar;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use model::{Attention, Model, ModelConfig, Upscaler};
pub use scalar::Scalar;
pub use tensor::{Activation, Graph, Shape, Tensor, Var};

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Model32 = Model<f32>;
pub type Model64 = Model<f64>;
pub type Graph32 = Graph<f32>;
pub type Graph64 = Graph<f64>;
