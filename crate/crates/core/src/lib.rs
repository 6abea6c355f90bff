//! Optimization-unrolled proximal networks for open-world learning.
//!
//! The crate is `no_std` and only needs `alloc`. It covers the dense matrix
//! substrate, proximal operators and the reference ISTA solver, graph and
//! hypergraph Laplacians, the unrolled layers and their multi-modal fusion,
//! open-world losses with agent-threshold rejection, and reverse-mode
//! training. File formats and the command line live in the `owl` crate.

#![no_std]
#![allow(clippy::neg_cmp_op_on_partial_ord)]

extern crate alloc;

#[cfg(test)]
#[macro_use]
extern crate std;

mod error;

pub mod data;
pub mod fusion;
pub mod graph;
pub mod numerics;
pub mod openworld;
pub mod prox;
pub mod train;
pub mod unroll;

pub use crate::error::{Error, Result};
pub use crate::numerics::{Mat, Rng};
