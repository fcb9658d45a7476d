//! Query-direction KV-cache compression: calibration of per-head filters,
//! cache eviction policies, a small reference transformer and planted
//! activation sources, and the analysis routines that validate them.
//!
//! `no_std` with `alloc`. File formats and the command line live in the
//! `qfilters` crate.

#![no_std]
#![allow(clippy::neg_cmp_op_on_partial_ord)]
extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod analysis;
pub mod calibration;
pub mod error;
pub mod kvcache;
pub mod linalg;
pub mod model;
pub mod rng;

pub use error::{Error, Result};
