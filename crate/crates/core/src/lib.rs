//! Desk-scale diffusion inversion laboratory.
//!
//! Small conditional noise-prediction networks are trained from scratch on a
//! synthetic scene/glyph image family, then used to compare three ways of
//! inverting an image into a diffusion trajectory (plain DDIM, per-step
//! null-embedding optimization, residual recording) and to drive a
//! triple-flow sampler that merges a reconstruction with a personalized
//! model's identity conditioning.

pub mod bimd;
pub mod data;
pub mod denoiser;
pub mod error;
pub mod inversion;
pub mod manifest;
pub mod pipeline;
pub mod schedule;
pub mod tensor;

pub use error::{Error, Result};
