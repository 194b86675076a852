//! Entropy-ranked patch selection and a SPAIR + windowed-attention
//! classifier for source camera model identification, with the tensor
//! engine, training loop, metrics and dataset tooling it needs.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod checkpoint;
pub mod data;
pub mod dataset;
pub mod error;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod patch;
pub mod pipeline;
pub mod report;
pub mod spair;
pub mod swin;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Graph, Tensor, Var};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
