//! Experiment runner for noise-space HMC: JSON configs in, CSV/JSON artifacts
//! plus a digest manifest out.

pub mod artifacts;
pub mod commands;
pub mod config;

pub use commands::{cmd_compare, cmd_oracle, cmd_run, cmd_sweep, load_config, ChainAbort, Method, Overrides, SweepAxis};
pub use config::{ConfigError, Experiment, ExperimentConfig};

/// Process exit status for an error: 2 for invalid configs, 1 otherwise.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    if err.downcast_ref::<ConfigError>().is_some() {
        2
    } else {
        1
    }
}
