//! Label super resolution trained from block-level count statistics.
//!
//! A segmentation network predicts per-pixel class probabilities; the losses
//! only ever see the low-resolution label attached to each block and a table
//! of target count moments for that label.

pub mod countstats;
pub mod diff;
pub mod error;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod provenance;
pub mod seed;
pub mod synth;
pub mod train;

pub use error::{LsrError, Result};
