use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid shape in {op}: {detail}")]
    InvalidShape { op: &'static str, detail: String },

    #[error("invalid groups: {channels} channels cannot be split into {groups} groups")]
    InvalidGroups { channels: usize, groups: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("invalid input size {size}: must be divisible by {divisor}")]
    InvalidInputSize { size: usize, divisor: usize },

    #[error("invalid codebook: {0}")]
    InvalidCodebook(String),

    #[error("invalid pyramid: {0}")]
    InvalidPyramid(String),

    #[error("invalid box: {0}")]
    InvalidBox(String),

    #[error("non-finite value produced by `{op}`")]
    NonFinite { op: String },

    #[error("training diverged at iteration {iteration}: {component} loss is {value}")]
    Diverged {
        iteration: u64,
        component: &'static str,
        value: f64,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::InvalidShape {
            op,
            detail: detail.into(),
        }
    }

    /// True for errors caused by bad user input rather than runtime failure.
    pub fn is_validation(&self) -> bool {
        !matches!(
            self,
            Error::Io(_) | Error::NonFinite { .. } | Error::Diverged { .. }
        )
    }
}
