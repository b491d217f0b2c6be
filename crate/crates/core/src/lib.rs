//! Diabetic-retinopathy grading toolkit: fundus image ingestion and
//! degradation, a compact attention-pooling CNN, Integrated Gradients
//! attribution and one-vs-rest evaluation metrics.

pub mod attribution;
pub mod error;
pub mod fundus;
pub mod metrics;
pub mod model;
pub mod synth;
pub mod tensor;

pub use error::{Error, Result};
