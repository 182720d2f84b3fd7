//! A desk-scale laboratory for the locality dial: block-partitioned
//! single-layer attention trained under group-sparsity penalties, with a
//! rule-to-penalty compiler, hot-reloadable rule injection, and report
//! tooling that measures the localization threshold and the entropy /
//! fidelity bounds it implies.
//!
//! Start with the runnable examples (`cargo run --example <name>`); the
//! `localist` binary wraps the same library surface as a pipeline CLI.

pub mod attention;
pub mod cli;
pub mod error;
pub mod numerics;
pub mod objective;
pub mod partition;
pub mod rules;
pub mod taskgen;
pub mod trainer;
pub mod verifier;

pub use error::{Error, Result};
