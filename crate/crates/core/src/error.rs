use thiserror::Error;

/// Errors produced by the analysis pipeline.
///
/// Every variant describes a problem with the caller's input; none of them
/// indicate an internal fault.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{location}: {message}")]
    Malformed { location: String, message: String },

    #[error("duplicate sample key ({kernel}, {platform}, {problem_size_bytes}, trial {trial})")]
    DuplicateKey {
        kernel: String,
        platform: String,
        problem_size_bytes: u64,
        trial: u32,
    },

    #[error("non-finite value for `{metric}` in {context}")]
    NonFinite { metric: String, context: String },

    #[error("{location}: unknown platform `{token}` (expected cpu or gpu)")]
    UnknownPlatform { location: String, token: String },

    #[error("sample {kernel}: missing counter `{counter}`")]
    MissingCounter { kernel: String, counter: String },

    #[error("sample {kernel}: GPU time must be strictly positive, got {value}")]
    NonPositiveTime { kernel: String, value: f64 },

    #[error("inconsistent metric sets across trials of {kernel} at {problem_size_bytes} bytes")]
    InconsistentMetrics { kernel: String, problem_size_bytes: u64 },

    #[error("kernel {kernel} has no sample at problem size {problem_size_bytes} bytes")]
    MissingSize { kernel: String, problem_size_bytes: u64 },

    #[error("metric `{metric}` absent for {context}")]
    AbsentMetric { metric: String, context: String },

    #[error("invariant violated for `{metric}` at row {row}: {message}")]
    ColumnInvariant {
        metric: String,
        row: String,
        message: String,
    },

    #[error("platform tables share no kernels")]
    EmptyIntersection,

    #[error("log transform of `{metric}` needs positive values, row {row} has {value}")]
    NonPositiveLog {
        metric: String,
        row: String,
        value: f64,
    },

    #[error("every column has zero variance")]
    AllZeroVariance,

    #[error("column `{0}` not found")]
    MissingColumn(String),

    #[error("dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },

    #[error("unknown row label `{0}`")]
    UnknownLabel(String),

    #[error("duplicate row label `{0}`")]
    DuplicateLabel(String),

    #[error("family patterns cover every row; nothing to compare against")]
    FamilyCoversAll,

    #[error("{0}")]
    InvalidArgument(String),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
