use thiserror::Error;

/// Errors raised anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes or vector lengths disagree.
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// A documented precondition was violated by the caller.
    #[error("contract violation: {0}")]
    Contract(String),

    /// The model description is not realizable.
    #[error("invalid model spec: {0}")]
    Spec(String),

    /// Synthetic data could not be generated with the requested settings.
    #[error("task generation failed: {0}")]
    Generation(String),

    /// Training produced a non-finite loss.
    #[error("training diverged at step {step}: loss = {loss}")]
    Divergence { step: usize, loss: f64 },

    /// Cosine similarity requested for a zero-norm vector.
    #[error("cosine similarity undefined: {0}")]
    UndefinedSimilarity(String),

    /// A computation would exceed a configured resource cap.
    #[error("resource limit exceeded: {0}")]
    Resource(String),

    /// A file could not be parsed or failed its integrity check.
    #[error("malformed file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// True for failures caused by non-finite numerics rather than bad input.
    pub fn is_numeric(&self) -> bool {
        matches!(self, Error::Divergence { .. })
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn contract(msg: impl Into<String>) -> Error {
    Error::Contract(msg.into())
}

pub(crate) fn dimension(msg: impl Into<String>) -> Error {
    Error::Dimension(msg.into())
}
