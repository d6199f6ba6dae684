//! Perceptual discrete visual codebook learning, CPU-only.
//!
//! The crate trains a small convolutional autoencoder whose latent grid is
//! vector-quantized against a learned codebook, with an optional deep
//! perceptual reconstruction loss and an optional adversarial term. The
//! resulting discrete token maps feed a masked-token transformer
//! pre-training stage, and an evaluation suite measures how much semantic
//! content the codewords carry.

pub mod codec;
pub mod error;
pub mod eval;
pub mod losses;
pub mod mim;
pub mod nn;
pub mod numerics;
pub mod perceptual;
pub mod pipeline;
pub mod quantizer;
pub mod synth;

pub use error::{Error, Result};
