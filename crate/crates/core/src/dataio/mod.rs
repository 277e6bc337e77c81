//! EEG archive format, dataset validation, Euclidean Alignment and
//! leave-one-subject-out splitting.

mod alignment;
mod archive;
mod epochs;
mod manifest;

use std::path::PathBuf;

pub use alignment::{align_training_set, AlignmentState, OnlineOrder, ALIGNMENT_EPSILON};
pub use archive::{load_archive, save_archive};
pub use epochs::{loso_split, EpochSet};
pub use manifest::{
    reflection_label_map, validate_manifest, DatasetManifest, SubjectId, ValidationReport,
    Violation,
};

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("failed to read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("corrupt file {path}: {reason}")]
    Corrupt { path: PathBuf, reason: String },
    #[error("validation failed: {0}")]
    Validation(String),
    #[error("non-finite sample in trial {trial}")]
    NonFinite { trial: usize },
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("{0}")]
    Usage(String),
}

pub type Result<T, E = DataError> = std::result::Result<T, E>;
