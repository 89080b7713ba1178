use thiserror::Error;

/// Errors raised by the model, solver, and simulation layers.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid hyperparameters: {0}")]
    InvalidHyper(String),

    #[error("kernel matrix is not positive definite even with jitter {jitter:e}")]
    IllConditioned { jitter: f64 },

    #[error("negative log-likelihood is not finite at the initial hyperparameters")]
    NonFiniteLikelihood,

    #[error("empty dataset: {0}")]
    EmptyData(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("target is outside the arm workspace (distance {distance:.4} m, reachable [{min:.4}, {max:.4}])")]
    Unreachable { distance: f64, min: f64, max: f64 },

    #[error("system matrix is not Hurwitz: {0}")]
    NotHurwitz(String),

    #[error("degenerate instance: {0}")]
    Degenerate(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("csv error in {path}: {msg}")]
    Csv { path: String, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::Io(io),
            kind => Error::Csv { path: "<stream>".into(), msg: format!("{kind:?}") },
        }
    }
}
