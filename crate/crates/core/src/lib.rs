//! Subnet-localized fine-tuning on small models.
//!
//! The crate trains a core sub-network of every linear layer: rows (input
//! neurons) and columns (output neurons) of each weight are selected from
//! smoothed sensitivity scores, reselected asynchronously one decoder layer
//! at a time, and updated by an AdamW step fused into the backward pass.

pub mod analysis;
pub mod autodiff;
pub mod error;
pub mod gradcheck;
pub mod importance;
pub mod localization;
pub mod model;
pub mod optimizer;
pub mod params;
pub mod schedule;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::DenseMatrix;
