//! Experiment command line over the `mvcnet` training library: main
//! comparison, pairwise augmentation grid, ablation, weight sensitivity,
//! feature export and markdown reports.
//!
//! Every CSV opens with `# config_sha256=<hex>` and `# seed=<n>` lines and
//! is written atomically (temporary file, then rename).

pub mod commands;
pub mod config;
pub mod output;
pub mod plot;
pub mod report;

pub use commands::{
    cmd_ablation, cmd_features, cmd_grid, cmd_run, cmd_sensitivity, cmd_synth, Experiment, Globals,
    ABLATION_ARMS,
};
pub use config::{load_config, ExperimentConfig, LoadedConfig, SensitivityGrid, TrainSection};
pub use report::render_report;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Malformed or inconsistent config file, anchored at `path:line`.
    #[error("invalid config: {0}")]
    Config(String),
    #[error("usage error: {0}")]
    Usage(String),
    #[error("I/O error: {0}")]
    Io(String),
    #[error("run failed: {0}")]
    Run(String),
}

impl CliError {
    /// Process exit code: 2 for problems with the invocation, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Usage(_) => 2,
            CliError::Io(_) | CliError::Run(_) => 1,
        }
    }
}
