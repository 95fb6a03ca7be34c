//! File formats, run configuration, the end-to-end pipeline and the
//! command-line front end for `pairsim-core`.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod config;
pub mod error;
pub mod formats;
pub mod pipeline;

pub use error::{CliError, CliResult};

/// Version string written into every CSV comment line.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
