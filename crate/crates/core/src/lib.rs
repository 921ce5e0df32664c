//! Coarse-to-fine search over transformer feed-forward architectures with warm-up
//! knowledge distillation, at desk scale.

pub mod data;
pub mod distill;
pub mod error;
pub mod ffn_space;
pub mod model;
pub mod pipeline;
pub mod search;
pub mod teacher;
pub mod tensor;
pub mod warmup;

pub use error::{Error, Result};
