use alloc::string::String;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("{what} out of domain: {value}")]
    Domain { what: &'static str, value: f64 },
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("stale cache: {0}")]
    StaleCache(&'static str),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }
}
