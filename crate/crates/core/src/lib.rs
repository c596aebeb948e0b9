//! Desk-scale laboratory for cross-lingual knowledge distillation of
//! transformer encoders.
//!
//! The crate is organized along the pipeline:
//!
//! - [`compute`]: reverse-mode differentiable tensor engine
//! - [`model`]: BERT-style encoder with per-layer forward traces
//! - [`distill`]: attention / hidden-state losses, layer mappings, student
//!   initialization, frozen-parameter policies
//! - [`train`]: AdamW, warmup/decay schedule, the MLM / distillation /
//!   fine-tuning loops
//! - [`data`]: synthetic multilingual corpus and sentence-pair task
//!   generators with shared anchor tokens
//! - [`eval`]: zero-shot cross-lingual reports, baseline arms, ablations
//! - [`config`] / [`checkpoint`] / [`pipeline`]: run configuration,
//!   binary checkpoints, and the command entry points the CLI wraps

pub mod checkpoint;
pub mod compute;
pub mod config;
pub mod data;
pub mod distill;
pub mod error;
pub mod eval;
pub mod model;
pub mod pipeline;
pub mod train;

pub use error::{Error, Result};
