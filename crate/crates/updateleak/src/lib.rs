//! Reconstruction attacks against online-learning updates of black-box
//! classifiers, with the `leakctl` pipeline around them.
//!
//! The algorithms without a neural component (splits, assignment, K-means,
//! losses, metrics, baselines) live in `updateleak-core` and are re-exported
//! as [`core`].

pub use updateleak_core as core;

pub mod attack;
pub mod config;
pub mod container;
pub mod corpus;
pub mod data;
pub mod defense;
mod error;
pub mod eval;
pub mod msr;
pub mod nn;
pub mod pipeline;
pub mod ssr;
pub mod victim;

pub use error::{Error, Result};
