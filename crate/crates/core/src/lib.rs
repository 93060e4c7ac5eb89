pub mod cli;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod experiment;
pub mod localization;
pub mod model;
pub mod objective;
pub mod seed;
pub mod training;

pub use error::{EcmError, Result};
