//! Correlation-matching semi-supervised segmentation on synthetic data.
//!
//! The crate is organized bottom-up:
//!
//! - [`tensor`]: flat `f64` tensors with reverse-mode autodiff and a
//!   finite-difference gradient checker.
//! - [`label`]: per-pixel label grids, masks, nearest resampling.
//! - [`data`]: deterministic synthetic shape datasets and their binary format.
//! - [`augment`]: weak geometric / strong photometric views and CutMix.
//! - [`model`]: a small fully-convolutional segmentation network.
//! - [`engine`]: confidence thresholding, correlation-based label
//!   propagation, the combined loss, and the SGD training step.
//! - [`metrics`]: mIoU and pseudo-label quality ratios.

#![forbid(unsafe_code)]

pub mod augment;
pub mod data;
pub mod engine;
pub mod error;
pub mod label;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
pub use label::{LabelMap, Mask, IGNORE_LABEL};
pub use tensor::Tensor;
