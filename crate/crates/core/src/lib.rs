//! Label-free self-training for semantic segmentation under domain shift.
//!
//! Confident target images are picked per class, their pixel pseudo-labels
//! are filtered by class-wise entropy thresholds, and the model is adapted on
//! random zoomed-in patches with a cross-entropy term on trusted pixels and a
//! small focal term everywhere.

pub mod entropy;
pub mod error;
pub mod evaluate;
pub mod lst;
pub mod losses;
pub mod model;
pub mod par;
pub mod pipeline;
pub mod scale_examples;
pub mod seed;
pub mod selection;
pub mod synth;
pub mod tensor;

pub use error::{Error, Result};
