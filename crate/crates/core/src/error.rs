use std::fmt;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Direction of a DDIM transition, used to give step errors context.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepKind {
    Denoise,
    Invert,
}

impl fmt::Display for StepKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            StepKind::Denoise => f.write_str("denoise"),
            StepKind::Invert => f.write_str("invert"),
        }
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: expected {expected:?}, got {actual:?}")]
    ShapeMismatch {
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("timestep {t} out of range 0..={max}")]
    TimestepOutOfRange { t: usize, max: usize },

    #[error("invalid noise schedule: {0}")]
    InvalidSchedule(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("value out of range: {0}")]
    OutOfRange(String),

    #[error("non-finite values: {0}")]
    NonFinite(String),

    #[error("{kind} step at t={t} failed: {source}")]
    Step {
        kind: StepKind,
        t: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("backend `{backend}` unavailable: {reason}")]
    BackendUnavailable { backend: String, reason: String },

    #[error("backend `{backend}` failed: {message}")]
    Backend { backend: String, message: String },

    #[error("object not found: {0}")]
    ObjectNotFound(String),

    #[error("could not parse chat response: missing field `{0}`")]
    MissingField(&'static str),

    #[error("needs chat backend: instruction `{0}` matches no offline rule")]
    NeedsChatBackend(String),

    #[error("invalid prompts: {0}")]
    InvalidPrompts(String),

    #[error("image error: {0}")]
    Image(String),

    #[error("unknown run `{0}`")]
    UnknownRun(String),

    #[error("run `{0}` cannot be reused: {1}")]
    NotReusable(String, String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn backend(backend: impl Into<String>, message: impl fmt::Display) -> Self {
        Error::Backend {
            backend: backend.into(),
            message: message.to_string(),
        }
    }

    pub(crate) fn shape(expected: &[usize], actual: &[usize]) -> Self {
        Error::ShapeMismatch {
            expected: expected.to_vec(),
            actual: actual.to_vec(),
        }
    }

    /// Whether the message is safe and useful to show an end user verbatim.
    pub fn is_user_facing(&self) -> bool {
        matches!(
            self,
            Error::ObjectNotFound(_)
                | Error::NeedsChatBackend(_)
                | Error::MissingField(_)
                | Error::InvalidPrompts(_)
                | Error::InvalidConfig(_)
                | Error::OutOfRange(_)
                | Error::Image(_)
        )
    }
}
