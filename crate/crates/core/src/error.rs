use thiserror::Error;

/// Errors raised anywhere in the pipeline.
///
/// The CLI maps these onto exit codes, so the variants are grouped by how a
/// caller should react: bad arguments, unreadable files, or a broken
/// invariant inside the integer pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension {dim} = {value} is not divisible by filter size {filter}")]
    NotDivisible {
        dim: &'static str,
        value: usize,
        filter: usize,
    },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("shape mismatch at node `{node}`: {detail}")]
    ShapeMismatch { node: String, detail: String },
    #[error("malformed graph: {0}")]
    Graph(String),
    #[error("missing weight tensor `{0}`")]
    MissingWeights(String),
    #[error("degenerate quantization range [{lo}, {hi}]")]
    DegenerateRange { lo: f64, hi: f64 },
    #[error("unsupported: {0}")]
    Unsupported(String),
    #[error("report conventions differ: `{0}` vs `{1}`")]
    ConventionMismatch(String, String),
    #[error("format error: {0}")]
    Format(String),
    #[error("unsupported {what} version {found} (expected major {expected})")]
    Version {
        what: &'static str,
        found: u32,
        expected: u32,
    },
    #[error("invariant breach: {0}")]
    Invariant(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    /// True for errors caused by unreadable or incompatible files.
    pub fn is_format(&self) -> bool {
        matches!(
            self,
            Error::Format(_) | Error::Version { .. } | Error::Json(_) | Error::Io(_)
        )
    }

    pub fn is_invariant(&self) -> bool {
        matches!(self, Error::Invariant(_))
    }
}
