use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("{op}: domain error: {detail}")]
    Domain { op: &'static str, detail: String },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("backward requires a scalar loss on the tape: {0}")]
    Backward(String),

    #[error("batch norm needs at least 2 values per channel in train mode, got {0}")]
    DegenerateBatch(usize),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("{path}:{line}: {detail}")]
    Parse { path: String, line: usize, detail: String },

    #[error("{path}: bad PGM image: {detail}")]
    Image { path: String, detail: String },

    #[error("duplicate image path {0:?} in manifest")]
    DuplicatePath(String),

    #[error("image not found: {}", .0.display())]
    MissingImage(PathBuf),

    #[error("split list names unknown patient id {0:?}")]
    UnknownPatient(String),

    #[error("patient id {0:?} appears in more than one split list")]
    PatientInTwoSplits(String),

    #[error("label set mismatch: {0}")]
    LabelMismatch(String),

    #[error("roc: {0}")]
    SingleClass(String),

    #[error("corrupt checkpoint (section {section}): {detail}")]
    Corrupt { section: String, detail: String },

    #[error("unsupported checkpoint version {found} (supported: {supported})")]
    Version { found: u32, supported: u32 },

    #[error("non-finite training loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },

    #[error("validation set is empty or has no label with both classes")]
    EmptyValidation,

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape { op, detail: detail.into() }
    }

    pub(crate) fn corrupt(section: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Corrupt { section: section.into(), detail: detail.into() }
    }
}
