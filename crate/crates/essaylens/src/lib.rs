//! Std side of essaylens: corpus and embedding files, the model container,
//! configuration, the model registry, the command line and the HTTP service.

pub mod cli;
pub mod config;
pub mod container;
pub mod embfile;
pub mod error;
pub mod http;
pub mod pipeline;
pub mod provider;
pub mod registry;
pub mod textio;

pub use error::{Error, Result};
