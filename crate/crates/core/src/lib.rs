//! Feature boosting network for semantic segmentation.

pub mod attention;
pub mod backbone;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod export;
pub mod kv;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Tape, Tensor, Var};
