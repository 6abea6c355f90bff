//! File formats, experiment plumbing and the command implementations
//! behind the `owl` binary.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod checkpoint;
pub mod commands;
pub mod config;
mod error;
pub mod io;
pub mod manifest;
pub mod report;

pub use error::{Error, Result};
pub use owl_core;
