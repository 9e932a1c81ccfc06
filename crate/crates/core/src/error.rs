//! Crate-wide error type.

use alloc::string::String;

/// Errors surfaced by the captioning core.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    /// A tensor/vector dimension did not match the operation's contract.
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    /// An op produced NaN or Inf. Fail fast, no silent clamping.
    #[error("non-finite value produced by op `{op}`")]
    NonFinite { op: String },

    /// `backward` was called with a non-scalar loss.
    #[error("backward requires a scalar loss, got {numel} elements")]
    NonScalarLoss { numel: usize },

    /// `backward` was called twice on the same tape without a new forward pass.
    #[error("tape already consumed by backward; rebuild the forward pass")]
    TapeSpent,

    /// An optimizer update was requested for a parameter with no gradient.
    #[error("missing gradient for parameter `{0}`")]
    MissingGrad(String),

    /// The loss function handed to the gradient checker is not deterministic.
    #[error("gradient check target is not deterministic: two baseline evaluations differ ({a} vs {b})")]
    NonDeterministic { a: f64, b: f64 },

    /// A precondition on an argument failed.
    #[error("{0}")]
    InvalidArgument(String),

    /// Training diverged (non-finite loss), with epoch/step context.
    #[error("training diverged at epoch {epoch}, step {step}: {source}")]
    Diverged {
        epoch: usize,
        step: usize,
        source: alloc::boxed::Box<Error>,
    },
}

pub type Result<T> = core::result::Result<T, Error>;

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
