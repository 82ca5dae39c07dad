//! Policy optimization with sample dropout.

// Index loops mirror the sums they implement.
#![allow(clippy::needless_range_loop)]

pub mod diagnostics;
pub mod diff;
pub mod envs;
pub mod error;
pub mod estimation;
pub mod harness;
pub mod optimizers;
pub mod verify;

pub use error::{Error, Result};
