//! Two-pathway normalizer-free audio representation learning.

pub mod data;
pub mod dsp;
pub mod error;
pub mod eval;
pub mod model;
pub mod nn;
pub mod objectives;
pub mod study;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
