use std::io;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum U4dError {
    #[error("io error: {0}")]
    Io(#[from] io::Error),
    #[error("malformed file: {0}")]
    MalformedFile(String),
    #[error("corrupt data: {0}")]
    CorruptData(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("length error: {0}")]
    Length(String),
    #[error("alignment error: {0}")]
    Alignment(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("range error: {0}")]
    Range(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("input error: {0}")]
    Input(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("usage error: {0}")]
    Usage(String),
    #[error("insufficient samples: {0}")]
    InsufficientSamples(String),
    #[error("insufficient frames: {0}")]
    InsufficientFrames(String),
    #[error("undefined input: {0}")]
    UndefinedInput(String),
    #[error("degenerate geometry: {0}")]
    Degenerate(String),
    #[error("non-finite loss at step {step} (batch {batch_id}): {detail}")]
    NonFiniteLoss {
        step: usize,
        batch_id: usize,
        detail: String,
    },
}

impl U4dError {
    /// Stable snake_case name of the variant.
    pub fn kind(&self) -> &'static str {
        match self {
            U4dError::Io(_) => "io",
            U4dError::MalformedFile(_) => "malformed_file",
            U4dError::CorruptData(_) => "corrupt_data",
            U4dError::Format(_) => "format",
            U4dError::Length(_) => "length",
            U4dError::Alignment(_) => "alignment",
            U4dError::Config(_) => "config",
            U4dError::Range(_) => "range",
            U4dError::Domain(_) => "domain",
            U4dError::Input(_) => "input",
            U4dError::Shape(_) => "shape",
            U4dError::Usage(_) => "usage",
            U4dError::InsufficientSamples(_) => "insufficient_samples",
            U4dError::InsufficientFrames(_) => "insufficient_frames",
            U4dError::UndefinedInput(_) => "undefined_input",
            U4dError::Degenerate(_) => "degenerate",
            U4dError::NonFiniteLoss { .. } => "non_finite_loss",
        }
    }
}

pub type Result<T> = std::result::Result<T, U4dError>;

macro_rules! bail {
    ($variant:ident, $($arg:tt)*) => {
        return Err($crate::error::U4dError::$variant(format!($($arg)*)))
    };
}
pub(crate) use bail;
