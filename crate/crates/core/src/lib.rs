//! Multistage low-rank fine-tuning of weight-entangled super-transformers.
//!
//! A supernet holds one set of frozen pre-trained tensors. Every subnet
//! configuration reads the leading slice of those tensors, and all subnets
//! share stage-indexed low-rank adapters `(A_s, B_s)` that are trained in
//! three stages: the maxnet alone, then varying width, then varying width
//! and depth. Smaller subnets learn from the maxnet through logit and
//! feature distillation, and their gradients are scaled by their trainable
//! parameter counts.

pub mod autograd;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod distill;
pub mod error;
pub mod experiments;
pub mod gradcheck;
pub mod lora;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod sampler;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::Tensor;
