use thiserror::Error;

/// Errors surfaced by the pose pipeline.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("log map singular")]
    LogMapSingular,
    #[error("point behind or on camera plane")]
    BehindCamera,
    #[error("underdetermined: {usable} usable correspondences, need at least 4")]
    Underdetermined { usable: usize },
    #[error("numerical failure: {0}")]
    NumericalFailure(String),
    #[error("no convergent solution")]
    NoConvergentSolution,
    #[error("degenerate sample set")]
    DegenerateSampleSet,
    #[error("missing supervision target for grasp {0}")]
    MissingSupervision(usize),
    #[error("scene too crowded")]
    SceneTooCrowded,
    #[error("unsupported schema version {0}")]
    UnsupportedSchemaVersion(String),
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("length mismatch: {0}")]
    LengthMismatch(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("training diverged at iteration {iteration}: {message}")]
    Diverged { iteration: usize, message: String },
    #[error("io error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
