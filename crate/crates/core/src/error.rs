use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("index {index} out of range (size {size})")]
    Index { index: usize, size: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid input: {0}")]
    Input(String),

    /// The accumulated positions do not advance, so they cannot be rescaled
    /// onto the token index range.
    #[error("degenerate alignment (position span {span:e}){}", example.map(|e| format!(" in example {e}")).unwrap_or_default())]
    DegenerateAlignment { span: f64, example: Option<usize> },

    #[error("non-finite loss in example {example}")]
    NonFiniteLoss { example: usize },

    #[error("corrupt header: {0}")]
    CorruptHeader(String),

    #[error("unsupported format version {found:?} (expected {expected:?})")]
    VersionMismatch { found: String, expected: String },

    #[error("truncated record: {0}")]
    Truncated(String),

    #[error("malformed record on line {line}: {detail}")]
    Malformed { line: usize, detail: String },

    #[error("duplicate token {0:?}")]
    DuplicateToken(String),

    #[error("token id {0} has no class mapping")]
    Unmapped(usize),

    #[error("unknown token {0:?}")]
    UnknownToken(String),

    #[error("error rate is undefined for an empty reference")]
    EmptyReference,

    #[error("incompatible inputs: {0}")]
    Incompatible(String),

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

    /// Attaches an example index to a degenerate-alignment error.
    pub fn with_example(self, id: usize) -> Self {
        match self {
            Error::DegenerateAlignment { span, .. } => Error::DegenerateAlignment {
                span,
                example: Some(id),
            },
            other => other,
        }
    }
}
