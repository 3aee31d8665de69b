use thiserror::Error;

/// Errors raised by the design, theory and simulation routines.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("degenerate population: {0}")]
    DegeneratePopulation(String),

    #[error("invalid treatment split: {0}")]
    InvalidSplit(String),

    #[error("invalid assignment: {0}")]
    InvalidAssignment(String),

    #[error("population has no potential outcomes")]
    MissingOutcomes,

    #[error("singular covariance (reciprocal condition estimate {rcond:.3e}){hint}")]
    SingularCovariance { rcond: f64, hint: String },

    #[error("matrix is not positive definite: {0}")]
    NotPositiveDefinite(String),

    #[error("R^2 is undefined: {0}")]
    UndefinedRSquared(String),

    #[error("degenerate prior: {0}")]
    DegeneratePrior(String),

    #[error("value out of range: {0}")]
    Range(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("acceptance starvation after {draws} draws ({accepted} accepted)")]
    Starvation { draws: u64, accepted: u64 },

    #[error("calibration failed: {0}")]
    Calibration(String),

    #[error("split failed: {0}")]
    Split(String),

    #[error("pilot design is singular: {0}")]
    PilotSingular(String),

    #[error("undefined angle: {0}")]
    UndefinedAngle(String),

    #[error("noise tuning failed: {0}")]
    Tuning(String),

    #[error("input/output error: {0}")]
    Io(String),

    #[error("parse error: {0}")]
    Parse(String),
}

impl Error {
    /// Stable machine-readable code, used by the CLI's error documents and exit status.
    pub fn code(&self) -> &'static str {
        match self {
            Error::DegeneratePopulation(_) => "degenerate_population",
            Error::InvalidSplit(_) => "invalid_split",
            Error::InvalidAssignment(_) => "invalid_assignment",
            Error::MissingOutcomes => "missing_outcomes",
            Error::SingularCovariance { .. } => "singular_covariance",
            Error::NotPositiveDefinite(_) => "not_positive_definite",
            Error::UndefinedRSquared(_) => "undefined_r_squared",
            Error::DegeneratePrior(_) => "degenerate_prior",
            Error::Range(_) => "range",
            Error::Shape(_) => "shape",
            Error::Starvation { .. } => "acceptance_starvation",
            Error::Calibration(_) => "calibration_failure",
            Error::Split(_) => "split",
            Error::PilotSingular(_) => "pilot_singular",
            Error::UndefinedAngle(_) => "undefined_angle",
            Error::Tuning(_) => "tuning",
            Error::Io(_) => "io",
            Error::Parse(_) => "parse",
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Parse(e.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Parse(e.to_string())
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
