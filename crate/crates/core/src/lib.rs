//! Core of the essaylens scoring engine.
//!
//! Everything here is pure computation over `alloc` collections: tensors and
//! reverse-mode differentiation, the neural layers and scorer architectures
//! that run over sentence-embedding sequences, training losses and
//! optimizers, essay-set metadata and fold planning, quadratic weighted kappa
//! evaluation, and passage-similarity highlighting. File formats, the CLI and
//! the HTTP service live in the `essaylens` crate.

#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod autodiff;
pub mod corpus;
pub mod diagnostics;
pub mod embeddings;
pub mod error;
pub mod evaluation;
pub mod hypergen;
pub mod insight;
pub mod layers;
pub mod objectives;
pub mod optim;
pub mod rng;
pub mod scorers;
pub mod synthetic;

pub use autodiff::{Graph, NodeId, Tensor};
pub use error::{Error, Result};
