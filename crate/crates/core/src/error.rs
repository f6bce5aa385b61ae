use thiserror::Error;

/// Errors raised anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("matrix is not positive definite (pivot {pivot} at index {index})")]
    NotPositiveDefinite { index: usize, pivot: f64 },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("matrix is not symmetric (|a_ij - a_ji| = {asym:e} at ({row}, {col}))")]
    NotSymmetric { row: usize, col: usize, asym: f64 },
    #[error("insufficient samples: need at least {needed}, got {got}")]
    InsufficientSamples { needed: usize, got: usize },
    #[error("unsupported distribution: {0}")]
    UnsupportedDistribution(String),
    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),
    #[error("invalid feature map: {0}")]
    InvalidFeatureMap(String),
    #[error("empty input")]
    EmptyInput,
    #[error("invalid model set: {0}")]
    InvalidModelSet(String),
    #[error("fidelity index {index} out of range for {count} models")]
    FidelityOutOfRange { index: usize, count: usize },
    #[error("nonlinear solver diverged at z = {z:?}: {reason}")]
    SolverDivergence { z: Vec<f64>, reason: String },
    #[error("invalid solver configuration: {0}")]
    InvalidSolverConfig(String),
    #[error("degenerate statistics: {0}")]
    DegenerateStats(String),
    #[error("statistics carry no C_1k / C_kk matrices")]
    MissingMatrixStats,
    #[error("budget {budget} cannot afford one high-fidelity sample of cost {cost}")]
    BudgetTooSmall { budget: f64, cost: f64 },
    #[error("correlations must satisfy 1 = rho_11 > rho_12^2 > ... > rho_1K^2: {0}")]
    InvalidCorrelationOrdering(String),
    #[error("invalid costs: {0}")]
    InvalidCosts(String),
    #[error("allocation is not monotone: m_{k} = {prev} > m_{next_k} = {next}", next_k = k + 1)]
    NonMonotoneAllocation { k: usize, prev: usize, next: usize },
    #[error("allocation has no high-fidelity samples")]
    ZeroHighFidelity,
    #[error("sample set is not nested: {0}")]
    NonNestedData(String),
    #[error("count mismatch: {0}")]
    CountMismatch(String),
    #[error("no high-fidelity data")]
    EmptyData,
    #[error("missing fidelity: {0}")]
    MissingFidelity(String),
    #[error("dataset format error: {0}")]
    FormatError(String),
    #[error("dataset has {rows} rows, {requested} requested")]
    InsufficientRows { rows: usize, requested: usize },
    #[error("invalid experiment plan: {0}")]
    InvalidPlan(String),
    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    /// Short machine-readable name of the error variant.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::NotPositiveDefinite { .. } => "NotPositiveDefinite",
            Error::DimensionMismatch { .. } => "DimensionMismatch",
            Error::NotSymmetric { .. } => "NotSymmetric",
            Error::InsufficientSamples { .. } => "InsufficientSamples",
            Error::UnsupportedDistribution(_) => "UnsupportedDistribution",
            Error::InvalidDistribution(_) => "InvalidDistribution",
            Error::InvalidFeatureMap(_) => "InvalidFeatureMap",
            Error::EmptyInput => "EmptyInput",
            Error::InvalidModelSet(_) => "InvalidModelSet",
            Error::FidelityOutOfRange { .. } => "FidelityOutOfRange",
            Error::SolverDivergence { .. } => "SolverDivergence",
            Error::InvalidSolverConfig(_) => "InvalidSolverConfig",
            Error::DegenerateStats(_) => "DegenerateStats",
            Error::MissingMatrixStats => "MissingMatrixStats",
            Error::BudgetTooSmall { .. } => "BudgetTooSmall",
            Error::InvalidCorrelationOrdering(_) => "InvalidCorrelationOrdering",
            Error::InvalidCosts(_) => "InvalidCosts",
            Error::NonMonotoneAllocation { .. } => "NonMonotoneAllocation",
            Error::ZeroHighFidelity => "ZeroHighFidelity",
            Error::NonNestedData(_) => "NonNestedData",
            Error::CountMismatch(_) => "CountMismatch",
            Error::EmptyData => "EmptyData",
            Error::MissingFidelity(_) => "MissingFidelity",
            Error::FormatError(_) => "FormatError",
            Error::InsufficientRows { .. } => "InsufficientRows",
            Error::InvalidPlan(_) => "InvalidPlan",
            Error::Io { .. } => "Io",
            Error::Serde(_) => "Serde",
            Error::Csv(_) => "Csv",
        }
    }

    /// Coarse error class used for process exit codes.
    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Io { .. } => ErrorClass::Io,
            Error::Serde(_)
            | Error::InvalidPlan(_)
            | Error::InvalidDistribution(_)
            | Error::UnsupportedDistribution(_)
            | Error::InvalidFeatureMap(_)
            | Error::InvalidModelSet(_)
            | Error::InvalidSolverConfig(_)
            | Error::InvalidCosts(_)
            | Error::FormatError(_)
            | Error::Csv(_)
            | Error::MissingFidelity(_) => ErrorClass::Config,
            _ => ErrorClass::Numerical,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Config,
    Numerical,
    Io,
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
