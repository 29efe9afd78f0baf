use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("argument error: {0}")]
    Argument(String),

    #[error("unsupported configuration: {0}")]
    Unsupported(String),

    #[error("integration diverged at step {step} ({what})")]
    Diverged { step: usize, what: String },

    #[error("regression basis degenerate at step {step}: {detail}")]
    BasisDegenerate { step: usize, detail: String },

    #[error("out of range: {0}")]
    OutOfRange(String),

    #[error("legendre search grid too coarse at alpha={alpha:?} after {doublings} radius doublings")]
    SearchTooCoarse { alpha: Vec<f64>, doublings: usize },

    #[error("internal invariant violated: {0}")]
    Invariant(String),

    #[error("format error: {0}")]
    Format(String),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn config(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

pub(crate) fn argument(msg: impl Into<String>) -> Error {
    Error::Argument(msg.into())
}
