use crate::training::RunArtifacts;

pub type Result<T> = std::result::Result<T, Error>;

/// Unified error type for the whole crate.
///
/// The broad classes matter more than the payloads: callers (notably the CLI)
/// map `Validation`/`Contract`/`Shape`/`Domain` to "you asked for something
/// impossible", `Numeric`/`Divergence` to "the math blew up", and
/// `Io`/`Format`/`Length`/`Consistency` to "the outside world misbehaved".
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Tensor shapes do not line up for an operation.
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// A value is outside the mathematical domain of an operation
    /// (log of a non-positive number, probability outside [0, 1], ...).
    #[error("domain error: {0}")]
    Domain(String),

    /// An API precondition was violated (empty batch, label out of range, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    /// A non-finite value appeared where the math promises finite ones.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// A byte stream does not follow the expected file format.
    #[error("format error at byte {offset}: {detail}")]
    Format { offset: u64, detail: String },

    /// A byte stream ended early or has an inconsistent declared length.
    #[error("length error: {0}")]
    Length(String),

    /// Two inputs that must agree (e.g. image and label counts) do not.
    #[error("consistency error: {0}")]
    Consistency(String),

    /// Configuration validation failed; reports every violation at once.
    #[error("invalid configuration:\n  - {}", .0.join("\n  - "))]
    Validation(Vec<String>),

    /// Training produced a non-finite loss or gradient. Carries the state
    /// from the last completed iteration so callers can inspect or save it.
    #[error("training diverged at iteration {iteration}: {detail}")]
    Divergence {
        iteration: usize,
        detail: String,
        partial: Box<RunArtifacts>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub(crate) fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }
}
