//! Command-line surface: run configuration, image and checkpoint files,
//! the augmentation benchmark and the `sassl` subcommands.

pub mod bench;
pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod ppm;

pub use bench::{relative_change, BenchReport};
pub use checkpoint::{config_hash, Checkpoint, CheckpointError};
pub use commands::{exit_code, run, Cli};
pub use config::RunConfig;
