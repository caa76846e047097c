//! Continual neural-field mapping from streaming ray observations.
//!
//! A small SDF-and-colour field (multi-resolution grid plus two decoders) is
//! trained online while a synthetic 2D world changes around the sensor.
//! [`consensus`] holds the replay-free consensus optimizer and
//! [`strategies`] the baselines it is compared against.

// `!(x > 0.0)` is how config checks reject NaN along with bad values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod consensus;
pub mod error;
pub mod field;
pub mod loss;
pub mod metrics;
pub mod optim;
pub mod render;
pub mod rng;
pub mod runner;
pub mod strategies;
pub mod train;
pub mod world;

pub use error::{MapError, Result};
