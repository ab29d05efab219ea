//! Semi-supervised volumetric segmentation with three diversified
//! multi-scale encoder-decoders, deep supervision on labelled volumes, and
//! mutual plus diagonal hierarchical consistency on all volumes.

pub mod error;
pub mod gradcheck;
pub mod losses;
pub mod metrics;
pub mod network;
pub mod tensor;

pub use error::{Error, Result};
pub mod data;
pub mod trainer;
