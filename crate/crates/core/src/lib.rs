pub mod checkpoint;
pub mod config;
pub mod data;
pub mod diag;
pub mod error;
pub mod eval;
pub mod nn;
pub mod quant;
pub mod ssl;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
