use thiserror::Error;

/// Errors raised across the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("point {point:?} lies outside the chart domain of radius {radius}")]
    Domain { point: Vec<f64>, radius: f64 },
    #[error("geometry error: {0}")]
    Geometry(String),
    #[error("vector is not unit length (|v|_g = {norm})")]
    Normalization { norm: f64 },
    #[error("trajectory left the domain at t = {exit_time} before reaching t = {requested}")]
    Exit { exit_time: f64, requested: f64 },
    #[error("geodesic did not exit within t = {max_time}; the chart may be trapping")]
    Trapped { max_time: f64 },
    #[error("argument outside the admissible range: {0}")]
    Range(String),
    #[error("invalid input: {0}")]
    Input(String),
    #[error("solver did not converge after {iterations} iterations (residual {residual:e})")]
    Solver { iterations: usize, residual: f64, history: Vec<f64> },
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("consistency check failed: {0}")]
    Consistency(String),
    #[error("parse error at byte {position}: {message}")]
    Parse { position: usize, message: String },
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Process exit code used by the command-line runner.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Input(_) | Error::Precondition(_) | Error::Parse { .. } | Error::Config(_) | Error::Io(_) | Error::Json(_) | Error::Csv(_) => 2,
            _ => 3,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
