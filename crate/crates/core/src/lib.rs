//! Attention-guided saliency learning for binary DNA sequence classification.
//!
//! The crate bundles a small reverse-mode autodiff engine, a convolutional
//! classifier whose forward pass also produces per-position attention
//! weights, a training loop that masks the least-attended positions and
//! regularizes predictions on the masked input toward the clean ones, and
//! occlusion-based tooling to check what the trained model relies on.

pub mod analysis;
pub mod autodiff;
pub mod cli;
pub mod config;
pub mod dataio;
pub mod error;
pub mod model;
pub mod rng;
pub mod trainer;

pub use error::{Error, Result};
