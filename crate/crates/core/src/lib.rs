//! Core engine for a multi-scale image-to-image network that renders
//! shallow depth-of-field from wide depth-of-field RGB-D inputs.
//!
//! The crate is self-contained: a reverse-mode autodiff tape over dense
//! CHW tensors, the inverted-pyramid model, composite losses and image
//! metrics, a synthetic thin-lens scene renderer for training data, a
//! progressive level-by-level trainer, and the on-disk formats (PNG
//! samples, binary checkpoints, JSON configs and reports).

pub mod adam;
pub mod data;
pub mod error;
pub mod io;
pub mod loss;
pub mod model;
pub mod num;
pub mod render;
pub mod rng;
pub mod tape;
pub mod tensor;
pub mod train;

mod kernels;

pub use error::{ConfigError, DataError, Error, FormatError, Result, TensorError};
pub use num::Element;
pub use tensor::Tensor;
