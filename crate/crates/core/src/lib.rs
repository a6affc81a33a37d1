//! Spatiotemporal crop segmentation of satellite image time series (SITS).
//!
//! The crate bundles everything needed to train and evaluate a
//! shifted-window transformer encoder with a UNETR-style convolutional
//! decoder on stacks of multispectral tiles: a dense tensor core with
//! reverse-mode gradients, the encoder/decoder model, a binary tile
//! format plus a synthetic phenology dataset generator, a deterministic
//! SGD training harness, confusion-matrix metrics, and PPM rendering of
//! prediction maps.

pub mod config;
pub mod data;
pub mod decoder;
pub mod error;
pub mod metrics;
pub mod params;
pub mod render;
pub mod rng;
pub mod scalar;
pub mod swin;
pub mod tensor;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
