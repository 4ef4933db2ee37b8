//! Streaming acoustic echo cancellation with a built-in cross-attention
//! delay alignment block.

pub mod alignment;
pub mod autodiff;
pub mod cli;
pub mod data;
pub mod dsp;
pub mod error;
pub mod eval;
pub mod model;
pub mod train;

pub use error::{Error, Result};
