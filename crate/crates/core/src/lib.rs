//! Multi-modal classifier that mixes image volumes, ordinal measurements,
//! and categorical codes into a single learned query vector via cascaded
//! cross-attention, trained with modality dropout so that predictions stay
//! usable when whole modalities are missing at inference time.
//!
//! The crate is generic over the scalar type: models train in `f32`, while
//! gradient verification runs the same code in `f64` where finite
//! differences are trustworthy.

pub mod attention;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod embed;
pub mod error;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod runner;
pub mod scalar;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Epsilon used by every layer normalization in the crate.
pub const LN_EPS: f64 = 1e-5;
/// Negative-side slope of the leaky ReLU activations.
pub const LEAKY_SLOPE: f64 = 0.01;

/// Default single-precision tensor used for model state.
pub type Tensor32 = tensor::Tensor<f32>;
/// Double-precision tensor used by the gradient checker.
pub type Tensor64 = tensor::Tensor<f64>;
pub type Tape32 = tensor::Tape<f32>;
pub type Tape64 = tensor::Tape<f64>;
/// Single-precision model, the type the CLI trains and serializes.
pub type Model32 = model::MixerModel<f32>;
/// Double-precision model for gradient verification.
pub type Model64 = model::MixerModel<f64>;
