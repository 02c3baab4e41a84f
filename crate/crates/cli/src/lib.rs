//! Command-line front end: hierarchy validation, data generation, training,
//! transfer, decoding, evaluation, and the ablation suites.
//!
//! Every subcommand writes a `summary.json` next to its outputs with the
//! resolved configuration echoed back, and the same (config, seed) pair
//! always produces byte-identical summaries. Exit codes: 0 success,
//! 2 input/validation error, 3 numerical failure, 4 I/O error.

pub mod args;
pub mod commands;
pub mod suites;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Validation(String),
    #[error("{0}")]
    Numerical(String),
    #[error("{0}")]
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 2,
            CliError::Numerical(_) => 3,
            CliError::Io(_) => 4,
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

impl From<hieraseg::hierarchy::HierarchyError> for CliError {
    fn from(e: hieraseg::hierarchy::HierarchyError) -> CliError {
        CliError::Validation(e.to_string())
    }
}

impl From<hieraseg::htf::HtfError> for CliError {
    fn from(e: hieraseg::htf::HtfError) -> CliError {
        CliError::Io(e.to_string())
    }
}

impl From<hieraseg::checkpoint::CheckpointError> for CliError {
    fn from(e: hieraseg::checkpoint::CheckpointError) -> CliError {
        use hieraseg::checkpoint::CheckpointError as E;
        match &e {
            E::Io { .. } | E::Htf(_) => CliError::Io(e.to_string()),
            _ => CliError::Validation(e.to_string()),
        }
    }
}

impl From<hieraseg::datagen::DatagenError> for CliError {
    fn from(e: hieraseg::datagen::DatagenError) -> CliError {
        use hieraseg::datagen::DatagenError as E;
        match &e {
            E::Io { .. } | E::Htf(_) | E::Checksum { .. } => CliError::Io(e.to_string()),
            _ => CliError::Validation(e.to_string()),
        }
    }
}

impl From<hieraseg::train::TrainError> for CliError {
    fn from(e: hieraseg::train::TrainError) -> CliError {
        match &e {
            hieraseg::train::TrainError::NumericalFailure { .. } => {
                CliError::Numerical(e.to_string())
            }
            _ => CliError::Validation(e.to_string()),
        }
    }
}

impl From<hieraseg::translu::TransferError> for CliError {
    fn from(e: hieraseg::translu::TransferError) -> CliError {
        match &e {
            hieraseg::translu::TransferError::Train(t) => match t {
                hieraseg::train::TrainError::NumericalFailure { .. } => {
                    CliError::Numerical(e.to_string())
                }
                _ => CliError::Validation(e.to_string()),
            },
            _ => CliError::Validation(e.to_string()),
        }
    }
}

impl From<hieraseg::tensor::TensorError> for CliError {
    fn from(e: hieraseg::tensor::TensorError) -> CliError {
        CliError::Validation(e.to_string())
    }
}

impl From<hieraseg::bhccm::ModelError> for CliError {
    fn from(e: hieraseg::bhccm::ModelError) -> CliError {
        CliError::Validation(e.to_string())
    }
}

impl From<hieraseg::decode::DecodeError> for CliError {
    fn from(e: hieraseg::decode::DecodeError) -> CliError {
        CliError::Validation(e.to_string())
    }
}

impl From<hieraseg::metrics::MetricsError> for CliError {
    fn from(e: hieraseg::metrics::MetricsError) -> CliError {
        CliError::Validation(e.to_string())
    }
}

pub(crate) fn io_ctx(path: &std::path::Path, e: std::io::Error) -> CliError {
    CliError::Io(format!("{}: {e}", path.display()))
}

/// Write a JSON summary with a trailing newline (stable byte layout).
pub fn write_summary<T: serde::Serialize>(path: &std::path::Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| io_ctx(dir, e))?;
    }
    let mut body = serde_json::to_string_pretty(value)
        .map_err(|e| CliError::Io(format!("serializing summary: {e}")))?;
    body.push('\n');
    std::fs::write(path, body).map_err(|e| io_ctx(path, e))
}
