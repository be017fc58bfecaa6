//! Feature files, experiment configuration and result export.

pub mod avfs;
pub mod config;
pub mod export;

use std::path::{Path, PathBuf};

use thiserror::Error;

pub use avfs::{read_avfs, write_avfs, AvfsFile, AvfsRecord};
pub use config::ExperimentConfig;
pub use export::{
    export_gate_scores, export_gates, read_model, write_config_echo, write_history_csv,
    write_model, write_results_csv, GATES_COLUMNS, RESULTS_COLUMNS,
};

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Fs {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("not an AVFS file")]
    NotAvfs,
    #[error("corrupt file: expected {expected} bytes, found {actual}")]
    Corrupt { expected: u64, actual: u64 },
    #[error("unsupported AVFS version {0}")]
    Version(u32),
    #[error(
        "heterogeneous dimensions: sequence {index} has (d_a, d_v, L) = {found:?}, expected {expected:?}"
    )]
    Heterogeneous {
        index: usize,
        expected: (usize, usize, usize),
        found: (usize, usize, usize),
    },
    #[error("AVFS file carries no labels")]
    MissingLabels,
    #[error("invalid content: {0}")]
    Invalid(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

impl IoError {
    pub(crate) fn fs(path: &Path, source: std::io::Error) -> Self {
        IoError::Fs {
            path: path.to_path_buf(),
            source,
        }
    }
}
