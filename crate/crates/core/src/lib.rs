//! Compositional zero-shot part segmentation of point clouds with
//! decompositional consensus.
pub mod backbone;
pub mod consensus;
pub mod error;
pub mod gradcheck;
pub mod gradsuite;
pub mod metrics;
pub mod partprior;
pub mod synthgen;
pub mod tensor;
pub mod trainer;
pub use error::{Error, Result};
