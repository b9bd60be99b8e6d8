//! The `mtle` command line: argument parsing, settings resolution, run
//! manifests and one handler per subcommand.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::Parser;

use mtle_core::corpus::CorpusError;
use mtle_core::embedding::EmbeddingError;
use mtle_core::gradcheck::GradCheckSetupError;
use mtle_core::trainer::{CheckpointError, TrainError};

pub mod args;
mod commands;
pub mod config;
pub mod manifest;

pub use args::Cli;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    GradCheck(#[from] GradCheckSetupError),
    /// A verification or quality gate did not hold.
    #[error("{0}")]
    CheckFailed(String),
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    /// 1 for failed checks and diverged training, 2 for bad usage or input.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::CheckFailed(_) | CliError::Train(TrainError::NonFiniteLoss { .. }) => 1,
            _ => 2,
        }
    }
}

/// Parses `argv` (program name first), runs the command and returns the
/// process exit code. Normal output goes to `out`, diagnostics to stderr.
pub fn run<I, T>(argv: I, out: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return code;
        }
    };
    let raw: Vec<String> = argv.iter().map(|a| a.to_string_lossy().into_owned()).collect();
    match commands::dispatch(cli, &raw, out) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn init_logging(verbosity: u8) {
    let level = match verbosity {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .try_init();
}
