//! Synthetic heterogeneous multi-agent benchmark: data generation, the
//! adversarial training loop, evaluation, probing and throughput.

pub mod bench;
pub mod config;
pub mod error;
pub mod eval;
pub mod gradsuite;
pub mod model;
pub mod study;
pub mod synth;
pub mod train;

pub use config::{Scenario, TrainingConfig};
pub use error::{HarnessError, Result};
