//! Attention-guided lightweight segmentation network on a self-contained
//! NCHW tensor engine: forward kernels, reverse-mode gradients, the encoder
//! and attention decoder, focal-loss training, and a static cost model.

pub mod analysis;
pub mod autodiff;
pub mod blocks;
pub mod data;
pub mod error;
pub mod loss;
pub mod metrics;
pub mod network;
pub mod params;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
