use thiserror::Error;

/// Errors produced by the retrieval pipeline.
#[derive(Debug, Error)]
pub enum OmgError {
    #[error("empty trajectory")]
    EmptyTrajectory,

    #[error("invalid bounding box: {0}")]
    InvalidBox(String),

    #[error("invalid track: {0}")]
    InvalidTrack(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("degenerate embedding: {0}")]
    DegenerateEmbedding(String),

    #[error("embedding not unit-normalized (norm {norm})")]
    NotNormalized { norm: f64 },

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("unknown truth id {0:?}")]
    UnknownTruthId(String),

    #[error("non-finite loss: {0}")]
    NonFinite(String),

    #[error("tensor format: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl OmgError {
    /// True for failures caused by the numerics (degenerate embeddings,
    /// non-finite losses) rather than by malformed input.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            OmgError::DegenerateEmbedding(_)
                | OmgError::NonFinite(_)
                | OmgError::NotNormalized { .. }
        )
    }
}

pub type Result<T> = std::result::Result<T, OmgError>;
