use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("one-sided Jacobi SVD did not converge after {sweeps} sweeps")]
    SvdNonConvergence { sweeps: usize },

    #[error("rank {k} invalid for a {rows}x{cols} layer")]
    Rank { k: usize, rows: usize, cols: usize },

    #[error("non-finite value produced at {location}")]
    NonFinite { location: String },

    #[error("backward called on a tape without a completed forward pass")]
    NoForward,

    #[error("unknown initial condition kind '{0}'")]
    UnknownIc(String),

    #[error("collocation group '{0}' is empty")]
    EmptyGroup(&'static str),

    #[error("NaN gradient entry at slot {slot}")]
    NanGradient { slot: usize },

    #[error("training diverged at iteration {iter}: total loss {loss}")]
    Divergence { iter: usize, loss: f64 },

    #[error("stability violation: nu*dt/dx^2 = {ratio} exceeds 0.5")]
    Stability { ratio: f64 },

    #[error("errors are not monotonically decreasing under refinement: {errors:?}")]
    NonMonotone { errors: Vec<f64> },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            detail: detail.into(),
        }
    }
}
