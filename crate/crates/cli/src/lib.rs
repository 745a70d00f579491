//! Pipeline subcommands and the drive-session server behind the
//! `lanepilot` binary.

pub mod commands;
pub mod protocol;
pub mod session;

use std::path::{Path, PathBuf};

pub const WEIGHTS_FILE: &str = "weights.lcw";

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Contract(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}")]
    Data(#[from] lanepilot::data::DataError),
    #[error("{0}")]
    Model(#[from] lanepilot::models::ModelError),
    #[error("{0}")]
    Train(#[from] lanepilot::train::TrainError),
    #[error("{0}")]
    Eval(#[from] lanepilot::eval::EvalError),
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io { path: path.display().to_string(), source }
    }

    /// Stable tag for the `error[<kind>]:` prefix.
    pub fn kind(&self) -> &'static str {
        use lanepilot::train::TrainError;
        match self {
            CliError::Contract(_) => "contract",
            CliError::Io { .. } => "io",
            CliError::Data(lanepilot::data::DataError::Contract(_)) => "contract",
            CliError::Data(_) => "data",
            CliError::Model(_) | CliError::Train(TrainError::Model(_)) => "model",
            CliError::Train(TrainError::Diverged { .. }) => "numerical",
            CliError::Train(_) | CliError::Eval(_) => "contract",
        }
    }

    /// The single stderr line printed on failure.
    pub fn line(&self) -> String {
        let msg = self.to_string().replace('\n', " ");
        format!("error[{}]: {msg}", self.kind())
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

/// A checkpoint argument may name the weights file or the run directory
/// holding it.
pub fn resolve_checkpoint(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join(WEIGHTS_FILE)
    } else {
        path.to_path_buf()
    }
}
