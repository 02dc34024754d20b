//! Gait-sequence multi-instance learning for scoliosis screening.
//!
//! The pipeline splits each silhouette sequence into temporally contiguous
//! phase bags with DTW-based agglomerative clustering, encodes every bag with
//! a small convolutional backbone and temporal max pooling, fuses the bags
//! with a cascade of cross-attention blocks, and classifies the result with
//! two BNNeck heads: a three-way Negative/Neutral/Positive head and a
//! borderline-vs-rest head. Both heads receive a fixed text-guidance vector.
//!
//! Everything runs on the crate's own `f64` tensor and reverse-mode autodiff
//! ([`autodiff`]), so the whole model can be gradient-checked end to end.

pub mod autodiff;
pub mod cli;
pub mod data;
pub mod dtw;
pub mod error;
pub mod losses;
pub mod model;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::Tensor;
