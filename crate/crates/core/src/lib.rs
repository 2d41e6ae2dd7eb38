//! Prompt-tuned multi-modal object tracking at desk scale.
//!
//! A frozen transformer tracker over RGB inputs is adapted to a second,
//! pixel-aligned modality by training a small set of prompter blocks while
//! every foundation parameter stays fixed. The crate provides the tensor
//! autodiff substrate, the tracker and prompter forward passes, the training
//! objective and loop, a deterministic synthetic data generator, and
//! tracking metrics.

pub mod audit;
pub mod config;
pub mod error;
pub mod foundation;
pub mod metrics;
pub mod model;
pub mod objective;
pub mod prompt;
pub mod rng;
pub mod synthdata;
pub mod tensor;
pub mod tuner;

pub use error::{Error, Result};
pub use tensor::{Tape, Tensor, Var};
