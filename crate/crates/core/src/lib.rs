//! Compresses a fine-tuned model into a 1-bit sign-mask delta over a shared
//! base model, with a learned FP16 scale vector per patched projection that
//! runs along either its output rows or its input columns.

pub mod error;
pub mod tensor;

pub use error::{Error, Result};
pub mod artifact;
pub mod calib;
pub mod cli;
pub mod codec;
pub mod fit;
pub mod model;
pub mod report;
