//! Deterministic simulator for hybrid federated learning, where a server
//! that holds a small resampled dataset alternates its own SGD steps with
//! client aggregation, plus evaluators for the matching convergence bounds.
//!
//! The crate is organized around five pieces:
//!
//! * [`model`] — differentiable objectives over flat parameter vectors;
//! * [`data`] — synthetic data, non-IID partitioning, server resampling,
//!   IDX loading;
//! * [`protocol`] — the round engine (CLG-SGD, FedCLG-C/S, FedAvg,
//!   server-only, SCAFFOLD+) and communication accounting;
//! * [`theory`] — convergence-bound evaluation and constant estimation;
//! * [`harness`] — config files, seeded experiment runs, CSV traces and
//!   rounds-to-target comparisons.

pub mod data;
pub mod error;
pub mod harness;
pub mod model;
pub mod protocol;
pub mod rng;
pub mod theory;

pub use error::{Error, Result};
