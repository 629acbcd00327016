//! Point cloud geometry compression with a diffusion-based decoder.
//!
//! A cloud is normalized, summarized into a global shape latent and a set
//! of local detail latents, quantized and range coded. The decoder runs a
//! conditional reverse diffusion process from seeded Gaussian noise.

// `!(x > 0.0)` is used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod codec;
pub mod entropy;
pub mod error;
pub mod evaluation;
pub mod fixtures;
pub mod generator;
pub mod geometry;
pub mod latent;
pub mod model;
pub mod nn;
pub mod schedule;
pub mod training;

pub use candle_core::DType;
pub use codec::{decode, encode, Decoded, EncodeOptions, Encoded};
pub use error::{Error, Result};
pub use model::{CodecModel, RunConfig};
