use thiserror::Error;

/// Errors raised by the library.
///
/// Variants map one-to-one onto the failure kinds of the individual
/// operations so callers (notably the CLI) can route them to stable exit
/// codes.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("unsupported domain: {0}")]
    UnsupportedDomain(String),

    /// The assembled covariance is indefinite beyond tolerance, which
    /// signals an inadmissible cross-covariance parameter set.
    #[error("covariance model is not positive semidefinite (minimum eigenvalue {min_eigenvalue:.3e}, tolerance {tolerance:.3e})")]
    ModelInvalid { min_eigenvalue: f64, tolerance: f64 },

    #[error("insufficient replications: need at least {needed}, got {got}")]
    InsufficientReplications { needed: usize, got: usize },

    #[error("Cholesky factorization failed even with jitter {jitter:.3e}")]
    FactorizationFailure { jitter: f64 },

    #[error("Gram matrix is rank deficient: {dropped} direction(s) below tolerance")]
    RankDeficient { dropped: usize },

    #[error("invalid covariance: {0}")]
    InvalidCovariance(String),

    #[error("inconsistent eigensystem: {0}")]
    InconsistentEigensystem(String),

    #[error("score covariance is indefinite (minimum eigenvalue {min_eigenvalue:.3e}, largest {max_eigenvalue:.3e})")]
    IndefiniteScoreCovariance { min_eigenvalue: f64, max_eigenvalue: f64 },

    #[error("degenerate posterior for process {process}: {reason}")]
    DegeneratePosterior { process: usize, reason: String },

    #[error("insufficient draws: need at least {needed}, got {got}")]
    InsufficientDraws { needed: usize, got: usize },

    #[error("rank-deficient design for process {process}")]
    RankDeficientDesign { process: usize },

    #[error("unsupported loss `{0}` for this operation")]
    UnsupportedLoss(String),

    #[error("every posterior draw failed eigensystem construction ({failed} draw(s))")]
    AllDrawsFailed { failed: usize },

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("parse error: {0}")]
    Parse(String),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    /// True when the error stems from the numerical model rather than from
    /// malformed input or the filesystem.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            Error::ModelInvalid { .. }
                | Error::FactorizationFailure { .. }
                | Error::RankDeficient { .. }
                | Error::InvalidCovariance(_)
                | Error::InconsistentEigensystem(_)
                | Error::IndefiniteScoreCovariance { .. }
                | Error::DegeneratePosterior { .. }
                | Error::InsufficientDraws { .. }
                | Error::InsufficientReplications { .. }
                | Error::RankDeficientDesign { .. }
                | Error::AllDrawsFailed { .. }
        )
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::Io(io),
            other => Error::Parse(format!("{other:?}")),
        }
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        if e.is_io() {
            Error::Io(e.into())
        } else {
            Error::Parse(e.to_string())
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
