use thiserror::Error;

pub type Result<T> = std::result::Result<T, NlsError>;

#[derive(Debug, Error)]
pub enum NlsError {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("shape mismatch for {what}: expected {expected}, got {got}")]
    ShapeMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("coefficient is not 1-periodic: |f(t=0) - f(t=1)| = {gap:e} at node {node}")]
    NotPeriodic { node: usize, gap: f64 },

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("dense assembly of size {size} exceeds the cap {cap}")]
    CapExceeded { size: usize, cap: usize },

    #[error("time stepping unstable: {0}")]
    Stiffness(String),

    #[error("resolution too coarse: {0}")]
    Resolution(String),

    #[error("integration blew up: {0}")]
    Blowup(String),

    #[error("expression error: {0}")]
    Expr(String),

    #[error("config error at `{path}`: {msg}")]
    Config { path: String, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl NlsError {
    pub fn invalid(msg: impl Into<String>) -> Self {
        NlsError::InvalidInput(msg.into())
    }

    pub fn precondition(msg: impl Into<String>) -> Self {
        NlsError::Precondition(msg.into())
    }
}
