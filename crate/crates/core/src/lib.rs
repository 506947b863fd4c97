//! Mixture-of-Experts adaptation of small encoder transformers.
//!
//! The pipeline fine-tunes a dense encoder (the teacher), scores every FFN
//! neuron by a first-order loss-change estimate, splits each FFN into experts
//! that share the most important neurons, and trains the resulting sparse
//! student with layer-wise distillation against the teacher.

pub mod error;
pub mod tensor;

pub use error::{Error, Result};
pub mod model;
pub mod moe;
pub mod data;
pub mod importance;
pub mod distill;
pub mod optim;
pub mod checkpoint;
pub mod bench;
pub mod pipeline;
