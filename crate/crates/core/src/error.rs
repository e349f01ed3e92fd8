use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    /// A static-group stream does not cover every token exactly once as a query.
    #[error("coverage error: {0}")]
    Coverage(String),

    /// Gradient descent produced a non-finite metric.
    #[error("diverged at step {step} (last finite step: {last_finite_step:?})")]
    Diverged {
        step: usize,
        last_finite_step: Option<usize>,
    },

    #[error("sequence length {n} exceeds the exact-count bound {bound}; use the analytic path")]
    TooLarge { n: usize, bound: usize },
}

pub(crate) fn shape_err(msg: impl Into<String>) -> Error {
    Error::Shape(msg.into())
}
