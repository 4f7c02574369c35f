//! DeepSC-RI: a robust semantic communication system for image transmission.
//!
//! The pipeline transmits images that may carry adversarial "semantic
//! impairments": a multi-scale transformer encoder extracts fine- and
//! coarse-grained semantics, fuses them with cross-attention, sends them
//! through a simulated physical channel (AWGN or Rician fading), and a
//! convolutional decoder reconstructs a purified image. The crate also
//! provides the ISII impairment metric, a PGD-based impairment dataset
//! builder, and an SNR/ISII evaluation harness with PSNR/LPIPS/accuracy
//! metrics.

pub mod channel;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod impairment;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod plot;
pub mod rng;
pub mod training;

pub use error::{Error, Result};
