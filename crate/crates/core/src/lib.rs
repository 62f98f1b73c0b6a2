//! Domain-incremental learning over key-matched prompt pools.
//!
//! A small frozen transformer stands in for the usual pre-trained backbone;
//! per-domain prompt sets are matched by key, fused compositionally, and kept
//! aligned across domains by mining reusable historical prompts at domain
//! start and constraining new prompts toward them while they train. The
//! harness generates synthetic multi-domain streams, runs the sequential
//! experiment, and emits accuracy matrices, step logs, and checkpoints.

pub mod backbone;
pub mod checkpoint;
pub mod cli;
pub mod error;
pub mod harness;
pub mod mining;
pub mod numerics;
pub mod pool;
pub mod training;

pub use error::{Error, Result};
pub use numerics::{Tape, Tensor};
