//! Adaptive dual-network QR code deblurring.
//!
//! The crate implements the full pipeline: a dense tensor core with
//! reverse-mode autodiff, edge-guided attention blocks, the EG-Restormer and
//! LENet U-nets, blur-severity routing with a calibrated Laplacian-variance
//! threshold, synthetic blurred-QR dataset generation, desk-scale training,
//! and decode-rate evaluation against a pluggable QR codec backend.

pub mod blocks;
pub mod checkpoint;
pub mod codec;
pub mod error;
pub mod gradcheck;
pub mod image;
pub mod metrics;
pub mod models;
pub mod rng;
pub mod routing;
pub mod synth;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::{Scalar, Tensor};
