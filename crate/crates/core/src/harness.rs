//! Configuration, training orchestration, metrics persistence and the command line.

pub mod cli;
pub mod config;
pub mod sweep;
pub mod train;

pub use config::{load_config, Preset, RunConfig};
pub use sweep::{export_csv, run_sweep, GridSpec, RunStats};
pub use train::{train_all, train_seed, MetricsRecord, RunSummary, TimingRecord, Trainer};
