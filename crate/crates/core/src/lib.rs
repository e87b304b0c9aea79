//! Saliency-driven dynamic token pruning on a desk-scale decoder.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod cli;
pub mod diffmath;
mod error;
pub mod kvcache;
pub mod model;
pub mod objectives;
pub mod profiler;
pub mod pruner;
pub mod saliency;
pub mod trainer;

pub use error::{Error, Result};
