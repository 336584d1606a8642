//! Configuration, persistence and orchestration for `spde-ldp` experiments.

pub mod config;
pub mod io;
pub mod run;

pub use config::{parse_config, ConfigError, ConfigErrors, Experiment, RunConfig};
pub use io::{read_trajectory, write_trajectory, FormatError};
pub use run::{run_experiment, run_with_sink, DirSink, FileSink, RunError, RunManifest, RunOutcome};
