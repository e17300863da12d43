use std::path::PathBuf;

/// Errors raised anywhere in the pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("line {line}: parse error: {message}")]
    Parse { line: usize, message: String },

    #[error("line {line}: missing field `{field}`")]
    MissingField { line: usize, field: String },

    #[error("line {line}: invalid record: {message}")]
    InvalidRecord { line: usize, message: String },

    #[error("invalid click stats: {clicks} clicks > {impressions} impressions (ClickStats requires clicks <= impressions)")]
    ClickStats { clicks: u64, impressions: u64 },

    #[error("degenerate z-test: {0}")]
    Degenerate(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("empty data: {0}")]
    EmptyData(String),

    #[error("{what} length {len} exceeds maximum {max}")]
    Length {
        what: &'static str,
        len: usize,
        max: usize,
    },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad user input (config, data, paths) rather
    /// than internal failures.
    pub fn is_user_error(&self) -> bool {
        !matches!(self, Error::ShapeMismatch { .. } | Error::Json(_))
    }
}
