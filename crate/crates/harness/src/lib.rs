//! Experiment driver: scene and dataset generation, training, attack
//! sweeps and reporting on top of `csiguard-core`.

pub mod config;
pub mod error;
pub mod pipeline;
pub mod report;

pub use config::{AttackKind, ExperimentConfig};
pub use error::{HarnessError, Result};
pub use pipeline::Layout;
