//! Audit harness for SAE quality metrics on synthetic ground truth.
//!
//! The crate generates activations from a known feature dictionary
//! ([`synthgen`]), trains and degrades sparse autoencoders on them ([`sae`]),
//! scores them with ground-truth metrics ([`gtmetrics`]) and probe-based
//! proxy metrics ([`proxymetrics`]), and runs the reliability-statistics
//! suite ([`reliability`]) over the resulting score tables. [`harness`]
//! orchestrates full audits from a single config file.

pub mod error;
pub mod gtmetrics;
pub mod harness;
pub mod io;
pub mod probekit;
pub mod proxymetrics;
pub mod reliability;
pub mod rng;
pub mod sae;
pub mod score;
pub mod synthgen;

pub use error::{Error, Result};
