use alloc::string::String;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("shape error in {kernel}: {detail}")]
    Shape { kernel: &'static str, detail: String },

    #[error("non-finite value produced by {context}")]
    Numeric { context: String },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("loss builder is not deterministic: {first} != {second}")]
    Determinism { first: f64, second: f64 },
}

impl Error {
    pub(crate) fn shape(kernel: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            kernel,
            detail: detail.into(),
        }
    }

    pub(crate) fn numeric(context: impl Into<String>) -> Self {
        Error::Numeric {
            context: context.into(),
        }
    }

    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn degenerate(msg: impl Into<String>) -> Self {
        Error::Degenerate(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    /// True for failures caused by non-finite arithmetic rather than bad input.
    pub fn is_numeric(&self) -> bool {
        matches!(self, Error::Numeric { .. } | Error::Determinism { .. })
    }
}
