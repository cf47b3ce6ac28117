use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// A caller broke an operation's precondition (mismatched grids, lengths, time grids).
    #[error("contract violation: {0}")]
    Contract(String),

    /// A configuration value is out of its admissible range.
    #[error("invalid configuration `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("index out of range: {0}")]
    Range(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("state blow-up at step {step}: |X|_H = {norm:e}")]
    BlowUp { step: usize, norm: f64 },

    #[error("regression ensemble too small: {paths} paths for {features} features (need at least {required})")]
    InsufficientEnsemble {
        paths: usize,
        features: usize,
        required: usize,
    },

    #[error("scenario parse error: {0}")]
    Parse(String),

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
