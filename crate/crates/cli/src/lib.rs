//! Command-line driver: kernel catalog, convergence checks, receptive fields,
//! windowing error simulation, bias heatmaps and language-model runs, with
//! CSV/SVG artifacts and a hashed run manifest.

pub mod args;
pub mod commands;
pub mod experiment;
pub mod manifest;
pub mod svg;
pub mod table;

use rpe_core::{AttentionError, FieldError, KernelError, SeriesError};
use rpe_lm::LmError;
use thiserror::Error;

pub use args::{Cli, Command, Format};
pub use manifest::{OutputEntry, RunManifest};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}")]
    Malformed(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Numerical(_) => 3,
            CliError::Io { .. } | CliError::Malformed(_) => 4,
        }
    }

    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}

impl From<KernelError> for CliError {
    fn from(e: KernelError) -> Self {
        CliError::Usage(e.to_string())
    }
}

impl From<FieldError> for CliError {
    fn from(e: FieldError) -> Self {
        CliError::Numerical(e.to_string())
    }
}

impl From<AttentionError> for CliError {
    fn from(e: AttentionError) -> Self {
        CliError::Numerical(e.to_string())
    }
}

impl From<SeriesError> for CliError {
    fn from(e: SeriesError) -> Self {
        CliError::Numerical(e.to_string())
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Malformed(e.to_string())
    }
}

impl From<LmError> for CliError {
    fn from(e: LmError) -> Self {
        match e {
            LmError::Io { path, source } => CliError::Io { path, source },
            LmError::Diverged { .. } | LmError::Autograd(_) => CliError::Numerical(e.to_string()),
            LmError::Checkpoint(_) => CliError::Malformed(e.to_string()),
            other => CliError::Usage(other.to_string()),
        }
    }
}

/// Runs one parsed invocation and writes its manifest.
pub fn run(cli: &Cli, argv: &[String]) -> Result<RunManifest, CliError> {
    commands::configure_threads(cli.threads)?;
    let started = std::time::Instant::now();
    let mut manifest = RunManifest::new(cli, argv);
    let result = match &cli.command {
        Command::Experiment { config } => experiment::run_experiment(cli, config, &mut manifest),
        _ => commands::dispatch(cli, &cli.out_dir, &mut manifest),
    };
    manifest.wall_clock_secs = started.elapsed().as_secs_f64();
    if let Err(e) = &result {
        manifest.status = format!("failed: {e}");
    }
    manifest.write(&cli.out_dir)?;
    result.map(|_| manifest)
}
