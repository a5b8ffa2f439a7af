//! Reverse-mode differentiation over dense `f64` arrays, the consistency-aware
//! focal alignment objective, focal pooling, calibration metrics, a seeded
//! long-tailed synthetic data generator and a LoRA-adapted toy decoder.
//!
//! Everything here is `no_std` + `alloc`; file formats, the command line and
//! experiment orchestration live in the `cfa-lab` crate.

#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod array;
pub mod error;
pub mod gate;
pub mod gradcheck;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod pooling;
pub mod rng;
pub mod synth;
pub mod tape;
pub mod train;

pub use array::Array;
pub use error::{Error, Result};
pub use tape::{Graph, Var};
