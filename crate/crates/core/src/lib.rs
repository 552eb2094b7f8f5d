//! Masked-AES leakage simulation, MLP profiling and interpretation tools.
//!
//! The pipeline: simulate first-order masked traces ([`sim`]), label them
//! ([`dataset`]), train a dense network ([`nn`]), score it ([`metrics`]), and
//! look inside it ([`interp`]) to recover the per-trace mask shares.

pub mod aes;
pub mod dataset;
pub mod error;
pub mod interp;
pub mod metrics;
pub mod nn;
pub mod rng;
pub mod sim;

pub use error::{Error, Result};

/// Library version, recorded in output manifests.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
