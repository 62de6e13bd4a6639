use crate::estimator::TrainingHistory;

pub type Result<T> = std::result::Result<T, Error>;

/// Unified error type for the whole crate.
///
/// Variants are grouped by what the caller can do about them: bad arguments
/// (`InvalidParams`, `Domain`, `DimensionMismatch`), data problems (`Fit`,
/// `Degenerate`, `CsvFormat`), and runtime failures (`NonFinite`, `Diverged`,
/// `Io`, `Json`).
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid parameters: {0}")]
    InvalidParams(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("fit failed: {0}")]
    Fit(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("gradient tape is stale: network parameters changed since the forward pass")]
    StaleTape,

    /// Adversarial training tripped the divergence guard. The history up to
    /// the abort is attached so callers can inspect the loss trajectory.
    #[error("training diverged after {epochs} epochs (generator loss {last_loss_g:.4})")]
    Diverged {
        epochs: usize,
        last_loss_g: f64,
        history: Box<TrainingHistory>,
    },

    #[error("{path}: line {line}: {message}")]
    CsvFormat {
        path: String,
        line: usize,
        message: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidParams(msg.into())
    }

    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub(crate) fn fit(msg: impl Into<String>) -> Self {
        Error::Fit(msg.into())
    }

    pub(crate) fn degenerate(msg: impl Into<String>) -> Self {
        Error::Degenerate(msg.into())
    }
}
