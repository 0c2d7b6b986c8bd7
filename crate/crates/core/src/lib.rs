//! Procedural pain-expression face data and a dual-branch ViT trained with
//! cross-modal teacher/student distillation.

pub mod config;
pub mod error;
pub mod eval;
pub mod ledger;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod synth;
pub mod tensor;
pub mod tensor_file;
pub mod train;

pub use error::{Error, Result};
