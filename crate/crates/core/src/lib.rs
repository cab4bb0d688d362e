//! Facial action-unit detection with learned attention.
//!
//! A shared multi-scale region backbone feeds one branch per action unit.
//! Each branch learns channel attention and an initial spatial attention map,
//! refines the map with a fully connected binary CRF solved by differentiable
//! mean-field iterations, and gates its features with the refined map before
//! the per-unit classifier. Everything runs on a small reverse-mode tensor
//! engine that is generic over the floating point type.

pub mod attention;
pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod crf;
pub mod data;
pub mod diagnostics;
pub mod error;
pub mod head;
pub mod model;
pub mod nn;
pub mod optim;
pub mod scalar;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use scalar::{compensated_sum, CompensatedSum, Scalar};

/// Double precision tensor, the default element type.
pub type Tensor64 = tensor::Tensor<f64>;
pub type Graph64 = tensor::Graph<f64>;
