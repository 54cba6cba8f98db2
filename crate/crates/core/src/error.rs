use std::path::PathBuf;

use crate::grad::GradError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Grad(#[from] GradError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: malformed file: {detail}")]
    Format { path: PathBuf, detail: String },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("insufficient data: {0}")]
    Insufficient(String),
    #[error("utterance has {frames} frames, fewer than the requested minimum {min}")]
    TooShort { frames: usize, min: usize },
    #[error("feature width {got} does not match expected {expected}")]
    WidthMismatch { got: usize, expected: usize },
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("misaligned inputs: {0}")]
    Misaligned(String),
    #[error("degenerate episode: {0}")]
    Degenerate(String),
    #[error("training diverged at step {step}: non-finite {what}")]
    Diverged { step: usize, what: &'static str },
    #[error("missing embedding for utterance {0}")]
    MissingEmbedding(usize),
    #[error("{system} seed {seed}: {source}")]
    Cell {
        system: String,
        seed: u64,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, detail: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            detail: detail.into(),
        }
    }
}
