//! Structured multi-agent reinforcement learning over coupling graphs.
//!
//! Dependency sets are derived from state, observation and reward coupling
//! graphs and drive a decomposed actor-critic trainer. Tabular oracles check
//! the decompositions exactly on small games.

pub mod analysis;
pub mod builtin;
pub mod coupling;
pub mod dependency;
pub mod env;
pub mod error;
pub mod fixtures;
pub mod mabn;
pub mod mastac;
pub mod neural;
pub mod suites;

pub use error::{Error, Result};

/// Library version recorded in run metadata.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
