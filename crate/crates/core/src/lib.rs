//! Knowledge-distillation toolkit for the ResEmoteNet teacher and its
//! width-reduced students.

pub mod autodiff;
pub mod data;
pub mod distill;
pub mod error;
pub mod metrics;
pub mod nn;
pub mod tensor;
pub mod train;
pub mod zoo;

pub use error::{Error, Result};
