//! U-Net with exact backpropagation.
//!
//! Topology for depth `D` and base width `B` (widths `B * 2^l`):
//!
//! * encoder levels `l = 0..=D`, each a double conv (3x3 same conv, optional
//!   batch norm, ReLU, twice); 2x2 max-pool between levels; level `D` is the
//!   bottleneck;
//! * decoder levels `l = D-1..=0`: nearest 2x upsample, 3x3 conv halving the
//!   width (norm + ReLU), concatenation with the encoder skip, double conv;
//! * head: 1x1 conv to a single logit channel.
//!
//! Spatial dropout follows the two deepest non-bottleneck encoder levels,
//! the bottleneck and the deepest decoder level.

mod checkpoint;
mod config;
mod layers;
mod params;
mod tensor;
mod unet;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, read_checkpoint, write_checkpoint};
pub use config::{ForwardMode, UNetConfig};
pub use params::{
    conv_specs, count_params, init_params, BatchStats, ConvSpec, Gradients, NamedTensor,
    ParameterSet, BN_EPS, BN_MOMENTUM,
};
pub use tensor::Tensor;
pub use unet::{backward, forward, forward_with_seeds, sample_seeds, BackwardOutput};
