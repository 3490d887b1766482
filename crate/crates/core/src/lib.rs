//! Checkpoint surgery for Mixture-of-Experts models stored as safetensors.
//!
//! The pipeline is: open every parent checkpoint ([`safetensors`]), classify
//! tensor names into functional groups ([`taxonomy`]), measure per-tensor
//! differences against the base model and decide what to merge ([`merge`]),
//! then stream the result back to disk. [`analysis`] turns difference records
//! into heatmaps and histograms, and [`fixtures`] builds small synthetic
//! checkpoints with known differences.

pub mod analysis;
pub mod dtype;
pub mod error;
pub mod fixtures;
pub mod math;
pub mod merge;
pub mod parallel;
pub mod recipe;
pub mod safetensors;
pub mod taxonomy;

pub use dtype::DType;
pub use error::{Error, Result};
