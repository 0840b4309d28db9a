//! Source-free cross-subject adaptation for fMRI-to-embedding decoders.

pub mod error;
pub mod rng;
pub mod svd;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
