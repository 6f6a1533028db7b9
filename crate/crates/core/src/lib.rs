//! Discrete-event simulator for sharded-FFN data-parallel LLM inference.
//!
//! Weights outside the FFN blocks are replicated on every replica; each
//! replica owns the FFN of a subset of layers. A replica either pulls the
//! FFN weights it is missing ahead of use (WaS) or ships its activations to
//! the owner and gets the result back (CaS).
//!
//! Entry points: [`catalog::Scenario`] to describe a job and
//! [`engine::run_job`] to simulate it.

pub mod capacity;
pub mod cas_protocol;
pub mod catalog;
pub mod engine;
pub mod report;
pub mod simcore;
pub mod timing;
pub mod was_protocol;

pub use catalog::{Catalog, ConfigError, Scenario, WeightMode};
pub use engine::{run_job, run_job_with, RunOptions};
pub use report::{JobReport, RunStatus};
