//! Random space-time sampling and reconstruction of bandlimited
//! heat-diffusion fields on graphs.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod coherence;
pub mod embedding;
pub mod error;
pub mod graph;
pub mod reconstruct;
pub mod sampling;
pub mod spectral;

pub use error::{Error, Result};
