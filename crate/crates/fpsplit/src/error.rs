use thiserror::Error;

/// Failures surfaced by the solver and its drivers.
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("degenerate density: {0}")]
    Degenerate(String),

    #[error("integration error: {0}")]
    Integration(String),

    #[error("boundary mass {mass:.3e} exceeds the hard limit {limit:.3e}")]
    Truncation { mass: f64, limit: f64 },

    #[error("no convergence after {iterations} iterations (marginal residual {residual:.3e})")]
    NonConvergence { iterations: usize, residual: f64 },

    #[error("instance too large: {0}")]
    Size(String),

    #[error("oracle failure: {0}")]
    Oracle(String),

    #[error("time {t} outside [0, {horizon})")]
    TimeRange { t: f64, horizon: f64 },

    #[error("window {window}: {source}")]
    Window {
        window: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit status: 2 for configuration, 3 for solver, 4 for oracle failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Size(_) | Error::Io(_) => 2,
            Error::Oracle(_) => 4,
            Error::Window { source, .. } => source.exit_code(),
            _ => 3,
        }
    }

    /// Innermost error, unwrapping window context.
    pub fn root(&self) -> &Error {
        match self {
            Error::Window { source, .. } => source.root(),
            e => e,
        }
    }
}

pub(crate) fn config<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Config(msg.into()))
}
