use thiserror::Error;

pub type Result<T, E = ProfilingError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum ProfilingError {
    #[error("empty dataset")]
    EmptyDataset,

    #[error("row {row}: expected {expected} covariates, found {found}")]
    DimensionMismatch {
        row: usize,
        expected: usize,
        found: usize,
    },

    #[error("row {row}: follow-up time must be positive, got {value}")]
    NonPositiveTime { row: usize, value: f64 },

    #[error("row {row}: unknown status code {value:?} (expected 0 or 1)")]
    UnknownStatus { row: usize, value: String },

    #[error("row {row}: non-finite value in column {column}")]
    NonFinite { row: usize, column: String },

    #[error("duplicate provider_id {0:?}")]
    DuplicateProvider(String),

    #[error("csv error at row {row}: {message}")]
    Csv { row: usize, message: String },

    #[error("singular matrix in {0}")]
    Singular(&'static str),

    #[error("zero residual variance")]
    ZeroResidualVariance,

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("degenerate scale")]
    DegenerateScale,

    #[error("only {inside} scores inside the null interval (need at least {required})")]
    TooFewInInterval { inside: usize, required: usize },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("group {group}: {source}")]
    Group {
        group: usize,
        #[source]
        source: Box<ProfilingError>,
    },

    #[error("{what} did not converge in {iterations} iterations")]
    NonConvergence { what: &'static str, iterations: usize },

    #[error("fitted variance {value} is not positive at group median size {size}")]
    NonPositiveVariance { size: f64, value: f64 },

    #[error("no events")]
    NoEvents,

    #[error("monotone likelihood: coefficient norm exceeded {0}")]
    MonotoneLikelihood(f64),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl ProfilingError {
    /// Short machine-readable tag used by the CLI error record.
    pub fn kind(&self) -> &'static str {
        match self {
            ProfilingError::EmptyDataset => "empty_dataset",
            ProfilingError::DimensionMismatch { .. } => "dimension_mismatch",
            ProfilingError::NonPositiveTime { .. } => "nonpositive_time",
            ProfilingError::UnknownStatus { .. } => "unknown_status",
            ProfilingError::NonFinite { .. } => "non_finite",
            ProfilingError::DuplicateProvider(_) => "duplicate_provider",
            ProfilingError::Csv { .. } => "csv",
            ProfilingError::Singular(_) => "singular",
            ProfilingError::ZeroResidualVariance => "zero_residual_variance",
            ProfilingError::InsufficientData(_) => "insufficient_data",
            ProfilingError::DegenerateScale => "degenerate_scale",
            ProfilingError::TooFewInInterval { .. } => "too_few_in_interval",
            ProfilingError::InvalidParameter(_) => "invalid_parameter",
            ProfilingError::Group { source, .. } => source.kind(),
            ProfilingError::NonConvergence { .. } => "non_convergence",
            ProfilingError::NonPositiveVariance { .. } => "nonpositive_variance",
            ProfilingError::NoEvents => "no_events",
            ProfilingError::MonotoneLikelihood(_) => "monotone_likelihood",
            ProfilingError::Io(_) => "io",
            ProfilingError::Json(_) => "json",
        }
    }

    /// Row number carried by ingestion errors, if any.
    pub fn row(&self) -> Option<usize> {
        match self {
            ProfilingError::DimensionMismatch { row, .. }
            | ProfilingError::NonPositiveTime { row, .. }
            | ProfilingError::UnknownStatus { row, .. }
            | ProfilingError::NonFinite { row, .. }
            | ProfilingError::Csv { row, .. } => Some(*row),
            _ => None,
        }
    }
}
