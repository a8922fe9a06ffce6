//! GPU resourcing-on-demand for serverless deep learning: profiling,
//! complementary scheduling, token-based vertical scaling, lazy horizontal
//! scaling and a deterministic simulator that exercises all of them.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod domain;
pub mod error;
pub mod perfmodel;
pub mod profiler;
pub mod scheduler;
pub mod vscaler;
pub mod hscaler;
pub mod sim;

pub use error::{Error, Result};
