//! Stressed dynamics of compound Poisson loss processes.
//!
//! Given a reference compound Poisson model and expectation constraints on
//! the state at a stress time, the crate finds the KL-minimal equivalent
//! measure, evaluates its Girsanov kernel through Fourier space
//! time-stepping, and simulates paths under it.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analytics;
pub mod calibrate;
pub mod cli;
pub mod error;
pub mod fst;
pub mod model;
pub mod simulate;
pub mod stress;

pub use error::{Error, Result};
