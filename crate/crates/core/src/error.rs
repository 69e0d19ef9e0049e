use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("schedule mismatch: {0}")]
    ScheduleMismatch(String),

    #[error("duplicate class id {0} in class order")]
    DuplicateClass(u32),

    #[error("synthetic spec infeasible: {0}")]
    SpecInfeasible(String),

    #[error("invalid mask value {value} in {}", path.display())]
    InvalidMask { path: PathBuf, value: u32 },

    #[error("image/mask pair mismatch for stem `{0}`")]
    PairMismatch(String),

    #[error("io error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("shape error: {0}")]
    Shape(String),

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("input is not a per-pixel probability distribution: {0}")]
    NotSimplex(String),

    #[error("topology mismatch: {0}")]
    Topology(String),

    #[error("label {label} out of range for {channels} output channels")]
    LabelRange { label: u32, channels: usize },

    #[error("non-finite value in {what}{}", iter.map(|i| format!(" at iteration {i}")).unwrap_or_default())]
    Numeric { what: String, iter: Option<usize> },

    #[error("config error at `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("resume mismatch: checkpoint hash {found} does not match config hash {expected}")]
    ResumeMismatch { expected: String, found: String },

    #[error("no step reports under {}", .0.display())]
    EmptyRun(PathBuf),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("image codec error on {}: {source}", path.display())]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),
}

impl Error {
    /// Stable machine-readable code for the error kind.
    pub fn code(&self) -> &'static str {
        match self {
            Error::ScheduleMismatch(_) => "SCHEDULE_MISMATCH",
            Error::DuplicateClass(_) => "DUPLICATE_CLASS",
            Error::SpecInfeasible(_) => "SPEC_INFEASIBLE",
            Error::InvalidMask { .. } => "INVALID_MASK",
            Error::PairMismatch(_) => "PAIR_MISMATCH",
            Error::Io { .. } | Error::Image { .. } => "IO_ERROR",
            Error::Shape(_) => "SHAPE_ERROR",
            Error::Contract(_) => "CONTRACT_ERROR",
            Error::NotSimplex(_) => "NOT_SIMPLEX",
            Error::Topology(_) => "TOPOLOGY_ERROR",
            Error::LabelRange { .. } => "LABEL_RANGE",
            Error::Numeric { .. } => "NUMERIC_ERROR",
            Error::Config { .. } => "CONFIG_ERROR",
            Error::ResumeMismatch { .. } => "RESUME_MISMATCH",
            Error::Checkpoint(_) => "CHECKPOINT_ERROR",
            Error::EmptyRun(_) => "EMPTY_RUN",
            Error::Tensor(_) => "TENSOR_ERROR",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }
}
