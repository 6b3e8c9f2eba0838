use thiserror::Error;

/// Errors raised by the simulator and its algorithm modules.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid rank: {0}")]
    Rank(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("instance too large: {0}")]
    Size(String),

    #[error("infeasible: {0}")]
    Infeasible(String),

    #[error("scheduling error: {0}")]
    Scheduling(String),

    #[error("constraint violated: {0}")]
    Constraint(String),

    #[error("device limit exceeded: {0}")]
    DeviceLimit(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("i/o error: {0}")]
    Io(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl Error {
    /// True for errors that mean "no solution exists" rather than bad input.
    pub fn is_infeasible(&self) -> bool {
        matches!(self, Error::Infeasible(_) | Error::DeviceLimit(_) | Error::Scheduling(_))
    }
}
