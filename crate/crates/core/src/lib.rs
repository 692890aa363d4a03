//! Continual missing-modality learning with decomposed prompt pools.
//!
//! The crate is organized bottom-up:
//!
//! - [`tensor`]: dense tensors, reverse-mode tape, AdamW.
//! - [`backbone`]: the frozen multimodal transformer and its pretraining.
//! - [`prompt`]: key-query prompt pools.
//! - [`reconstruct`]: missing-query reconstruction through the memory pool.
//! - [`pipeline`]: the full model, its ablation variants, and training.
//! - [`bench`]: synthetic data, session splits, missing-modality masking.
//! - [`eval`]: metrics, experiment orchestration, and reports.

pub mod error;
pub mod eval;
pub mod tensor;

pub use error::{Error, Result};
pub mod backbone;
pub mod bench;
pub mod checkpoint;
pub mod pipeline;
pub mod prompt;
pub mod reconstruct;
pub mod seed;
