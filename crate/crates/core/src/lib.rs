//! Linear recovery of camera velocity and sparse structure from timestamped,
//! possibly fully asynchronous point tracks.
//!
//! Observations are turned into rotation-compensated bearings
//! ([`geometry`]), reduced to a small system in the motion rates
//! ([`linsys`]), and solved in closed form ([`solver`]). [`robust`] wraps the
//! solver in RANSAC and [`sim`] reproduces synthetic noise studies.

// `!(x > 0.0)` is used throughout to reject NaN along with non-positive values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod error;
pub mod geometry;
pub mod io;
pub mod linsys;
pub mod robust;
pub mod sim;
pub mod solver;

pub use error::{Error, Result};
