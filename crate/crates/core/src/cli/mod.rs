//! Configuration, persistence, the simulation driver and the user-facing commands.

pub mod commands;
pub mod config;
pub mod sim;
pub mod snapshot;

pub use config::{parse_config, ConfigError, SimulationConfig};
pub use sim::{SimError, Simulation, StepRecord};
pub use snapshot::{Snapshot, SnapshotError};
