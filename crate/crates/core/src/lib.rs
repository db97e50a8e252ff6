//! Non-local and disentangled non-local attention blocks built from scratch,
//! with machinery that checks their algebraic identities, gradients and
//! complexity, and a small synthetic segmentation benchmark.

pub mod analysis;
pub mod attention;
pub mod autograd;
pub mod bench;
pub mod cli;
pub mod error;
pub mod gradcheck;
pub mod io;
pub mod metrics;
pub mod scene;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{FeatureMap, Tensor};
