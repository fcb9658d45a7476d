//! File formats, benchmark harness and command line on top of
//! [`qfilters_core`].

pub mod cli;
pub mod error;
pub mod format;
pub mod harness;
pub mod report;

pub use error::{Error, Result};
pub use qfilters_core as core;
