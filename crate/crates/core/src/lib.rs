//! Class-incremental learning with progressive function matching against
//! every frozen past-task model, plus per-iteration gradient conflict
//! removal before the optimizer step.

// `!(x > 0.0)` is used deliberately so NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod credit;
mod error;
pub mod exec;
pub mod harness;
pub mod knowledge;
pub mod network;
pub mod numerics;
pub mod runner;

pub use error::{Error, Result};
pub use exec::Execution;
