//! Dual prompt-pool representation learning for multi-domain all-in-one image
//! restoration, at desk scale.

pub mod backbone;
pub mod data;
pub mod error;
pub mod fusion;
pub mod nn;
pub mod prompt_pool;
pub mod regularizers;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
