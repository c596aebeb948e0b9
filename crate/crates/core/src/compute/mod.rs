//! Minimal reverse-mode differentiable tensor engine.
//!
//! Provides exactly the operations the encoder and the distillation losses
//! require, on dense f64 buffers. Tensors and graphs are single-writer; a
//! graph is confined to one logical execution context during forward and
//! backward.

mod graph;
pub mod gradcheck;
mod tensor;

pub use graph::{Graph, TensorId, IGNORE_LABEL, MASK_BIAS};
pub use tensor::Tensor;

#[cfg(test)]
mod tests;
