//! Experiment harness: spec files, dataset generation, training, sweeps,
//! ablations and timing, with manifests tying outputs to a spec and seed.

pub mod commands;
pub mod data;
pub mod error;
pub mod manifest;
pub mod output;
pub mod session;
pub mod spec;

pub use error::{HarnessError, Result};
pub use session::Session;
pub use spec::{ExperimentSpec, Method};
