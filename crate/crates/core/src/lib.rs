//! Pure algorithms behind the update-leakage attacks.
//!
//! Everything here works on plain slices and owned vectors, needs only
//! `alloc`, and is deterministic given its seed arguments. The neural
//! networks, file formats and the command line live in the `updateleak`
//! companion crate.

#![no_std]

extern crate alloc;

pub mod assignment;
pub mod baseline;
pub mod checkin;
pub mod cluster;
pub mod dataset;
mod error;
pub mod loss;
pub mod metrics;
pub mod noise;
pub mod posterior;
pub mod rng;
pub mod samples;

pub use error::{Error, Result};
pub use samples::SampleSet;
