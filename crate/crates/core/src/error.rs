use thiserror::Error;

/// Errors produced by the gain-statistics, simulation, spectrum, fitting and
/// ingest routines.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("truncation failure: tail mass {tail_mass:e} still above tolerance {tolerance:e} at hard cap {hard_cap}")]
    TruncationFailure {
        tail_mass: f64,
        tolerance: f64,
        hard_cap: usize,
    },

    #[error("degenerate distribution: {0}")]
    DegenerateDistribution(String),

    #[error("support overflow: result needs {required} entries, hard cap is {hard_cap}")]
    SupportOverflow { required: usize, hard_cap: usize },

    #[error("negative probability {value:e} at m = {m}")]
    NegativeProbability { m: usize, value: f64 },

    #[error("avalanche breakdown: beta*L = {beta_l} is at or beyond breakdown ({breakdown}) for k = {k}")]
    Divergence { k: f64, beta_l: f64, breakdown: f64 },

    #[error("no solution: {0}")]
    NoSolution(String),

    #[error("grid too coarse: spacing {spacing} exceeds sigma/4 = {limit}")]
    GridTooCoarse { spacing: f64, limit: f64 },

    #[error("no convergence after {iterations} iterations")]
    NoConvergence { iterations: usize },

    #[error("degenerate data: {0}")]
    DegenerateData(String),

    #[error("no plateau: relative slope {slope_per_volt:.4}/V around {unity_bias} V exceeds {threshold}/V")]
    NoPlateau {
        unity_bias: f64,
        slope_per_volt: f64,
        threshold: f64,
    },

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("non-monotonic time at line {line}: {timestamp} does not exceed {previous}")]
    NonMonotonicTime {
        line: usize,
        timestamp: f64,
        previous: f64,
    },

    #[error("window too short: {0}")]
    WindowTooShort(String),

    #[error("excessive censoring: {censored} of {trials} trials hit the event cap")]
    ExcessiveCensoring { censored: u64, trials: u64 },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Short machine-readable tag, used by the command line front end.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidParameter(_) => "invalid-parameter",
            Error::TruncationFailure { .. } => "truncation-failure",
            Error::DegenerateDistribution(_) => "degenerate-distribution",
            Error::SupportOverflow { .. } => "support-overflow",
            Error::NegativeProbability { .. } => "negative-probability",
            Error::Divergence { .. } => "divergence",
            Error::NoSolution(_) => "no-solution",
            Error::GridTooCoarse { .. } => "grid-too-coarse",
            Error::NoConvergence { .. } => "no-convergence",
            Error::DegenerateData(_) => "degenerate-data",
            Error::NoPlateau { .. } => "no-plateau",
            Error::Parse { .. } => "parse-error",
            Error::NonMonotonicTime { .. } => "non-monotonic-time",
            Error::WindowTooShort(_) => "window-too-short",
            Error::ExcessiveCensoring { .. } => "excessive-censoring",
            Error::Io(_) => "io",
            Error::Csv(_) => "csv",
            Error::Json(_) => "json",
        }
    }

    /// Whether the error stems from bad inputs rather than a failure while
    /// running a valid request.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::InvalidParameter(_)
                | Error::DegenerateDistribution(_)
                | Error::Divergence { .. }
                | Error::NoSolution(_)
                | Error::GridTooCoarse { .. }
                | Error::DegenerateData(_)
                | Error::NoPlateau { .. }
                | Error::Parse { .. }
                | Error::NonMonotonicTime { .. }
                | Error::WindowTooShort(_)
                | Error::Json(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
