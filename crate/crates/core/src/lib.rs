//! Channel-time patch transformer for multivariate time-series forecasting.

pub mod checkpoint;
#[cfg(feature = "cli")]
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod model;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use model::{CtPatchTst, ModelConfig};
pub use tensor::{Tape, Tensor, Var};
