//! Sentence-level language modeling (SLM) pre-training at desk scale.

pub mod batch;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod diagnostics;
pub mod error;
pub mod eval;
pub mod heads;
pub mod masking;
pub mod model;
pub mod objectives;
pub mod optim;
pub mod predict;
pub mod probe;
pub mod rng;
pub mod shuffle;
pub mod synthetic;
pub mod tensor;
pub mod text;
pub mod trainer;

pub use error::{Result, SlmError};
