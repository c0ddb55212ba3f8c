use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("missing column `{0}`")]
    MissingColumn(String),

    #[error("parse error at row {row}: {message}")]
    Parse { row: usize, message: String },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("degenerate design: {0}")]
    DegenerateDesign(String),

    #[error("rank deficient: {0}")]
    Rank(String),

    #[error("ill-conditioned Jacobian (condition number {0:.3e})")]
    IllConditioned(f64),

    /// The oriented moment Jacobian is not positive semidefinite.
    #[error("orientation violation: smallest eigenvalue of W is {0:.3e}")]
    Orientation(f64),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("privacy violation: {0}")]
    Privacy(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// True for errors caused by user input rather than by the numerics.
    pub fn is_config(&self) -> bool {
        matches!(
            self,
            Error::InvalidConfig(_)
                | Error::MissingColumn(_)
                | Error::Parse { .. }
                | Error::Dimension(_)
                | Error::Io(_)
                | Error::Json(_)
                | Error::Csv(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
