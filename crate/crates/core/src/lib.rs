//! Gradient-uniqueness (GNQ) auditing for mini-batch SGD.
//!
//! The crate scores how far each training example's gradient sits outside
//! the span of everyone else's, turns those scores into per-example
//! membership-leakage bounds, and ships brute-force oracles for every closed
//! form it relies on.

pub mod attack;
pub mod bounds;
pub mod data;
pub mod defense;
pub mod error;
pub mod geometry;
pub mod linalg;
pub mod models;
pub mod oracle;
pub mod sampling;
pub mod trainer;

pub use error::{AuditError, ErrorClass, Result};
