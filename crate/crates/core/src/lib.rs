//! Field-scale crop segmentation on 64-band embedding chips.
//!
//! The crate covers the whole workflow: chip containers and spatially
//! blocked splits ([`chipdata`]), a synthetic embedding-field generator with
//! a closed-form Bayes-accuracy ceiling ([`synthfields`]), a from-scratch
//! U-Net with exact backpropagation ([`segnet`]), the masked BCE + soft-Dice
//! objective ([`objective`]), pixel and chip metrics ([`metrics`]), AdamW
//! training ([`trainer`]) and Monte Carlo dropout inference
//! ([`bayesinfer`]).
//!
//! Network math is generic over [`Scalar`] (`f32` and `f64`). Training runs
//! in `f32`; gradient verification runs in `f64`.

pub mod bayesinfer;
pub mod chipdata;
pub mod error;
pub mod metrics;
pub mod objective;
pub mod raster;
pub mod rng;
pub mod scalar;
pub mod segnet;
pub mod synthfields;
pub mod trainer;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Parameters in the storage precision used for training and checkpoints.
pub type Params = segnet::ParameterSet<f32>;
/// Double-precision parameters, used for gradient verification.
pub type Params64 = segnet::ParameterSet<f64>;
/// Gradients matching [`Params`].
pub type Grads = segnet::Gradients<f32>;
/// Gradients matching [`Params64`].
pub type Grads64 = segnet::Gradients<f64>;
/// Activation tensor in training precision.
pub type Tensor32 = segnet::Tensor<f32>;
/// Activation tensor in double precision.
pub type Tensor64 = segnet::Tensor<f64>;
