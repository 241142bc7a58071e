use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Library-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// Input data or model specification violates an invariant.
    #[error("validation error: {0}")]
    Validation(String),

    /// Malformed input file (CSV/JSON).
    #[error("data error: {0}")]
    Data(String),

    /// Design matrix rank deficiency. `columns` lists the offending
    /// (zero-based) column indices of the design that was being solved.
    #[error("singular design: collinear columns {columns:?} ({detail})")]
    Singular { columns: Vec<usize>, detail: String },

    /// An iterative solver stopped without meeting its tolerance.
    #[error("non-convergence: {0}")]
    NonConvergence(String),

    /// A mixture component lost all posterior mass during an M-step.
    #[error("component {0} collapsed (posterior mass below 1e-10)")]
    ComponentCollapse(usize),

    /// Gaussian residual variance shrank to a degenerate spike.
    #[error("degenerate fit: residual variance {0:.3e} below 1e-10")]
    DegenerateSigma(f64),

    /// Estimation failed after exhausting all starts/retries.
    #[error("estimation failure: {0}")]
    Estimation(String),

    /// Standard errors requested at a point that is not a stationary point.
    #[error("not at an optimum: max |score| = {grad_norm:.3e}")]
    NotAtOptimum { grad_norm: f64 },

    #[error("configuration error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Process exit code for the CLI: 1 usage, 2 data, 3 estimation.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 1,
            Error::Validation(_) | Error::Data(_) | Error::Csv(_) | Error::Json(_) | Error::Io(_) => 2,
            _ => 3,
        }
    }
}
