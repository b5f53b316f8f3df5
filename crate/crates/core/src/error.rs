use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("matrix is not a rotation (orthogonality error {ortho:.3e}, det {det:.9})")]
    NotRotation { ortho: f64, det: f64 },
    #[error("quaternion norm {0:e} is too small to normalize")]
    DegenerateQuaternion(f64),
    #[error("rank-deficient configuration: {0}")]
    RankDeficient(String),
    #[error("too few inliers: need {needed}, got {got}")]
    TooFewInliers { needed: usize, got: usize },
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("non-finite value produced by {0}")]
    NonFinite(String),
    #[error("no model found: {0}")]
    NoModel(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("truncated data: {0}")]
    Truncated(String),
    #[error("unsupported format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("unattainable target: {0}")]
    Unattainable(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }
}
