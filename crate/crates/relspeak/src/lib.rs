//! Relational speaker models for two-image captioning.
//!
//! The crate layers a tiny reverse-mode autodiff engine under four
//! attention-based caption decoders (basic, sequential multi-head, static
//! relational, dynamic relational), and wires them into a training and
//! evaluation harness with corpus captioning metrics and a deterministic
//! synthetic paired-scene dataset generator.

pub mod data;
pub mod error;
pub mod gradcheck;
pub mod harness;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
