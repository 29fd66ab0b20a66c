//! Crate-wide error type with machine-readable categories.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("singular chord denominator at {which} = {height_m} m")]
    Singularity { which: &'static str, height_m: f64 },

    #[error("integration diverged at t = {time_s} s (h_HP = {h_hp_m} m, h_DP = {h_dp_m} m): {reason}")]
    Divergence {
        time_s: f64,
        h_hp_m: f64,
        h_dp_m: f64,
        reason: String,
    },

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("parse error in {path} (line {line}): {message}")]
    Parse {
        path: String,
        line: u64,
        message: String,
    },

    #[error("model format error: {0}")]
    ModelFormat(String),

    #[error("training failed: {0}")]
    Training(String),

    #[error("filter error: {0}")]
    Filter(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Stable category tag, used by the CLI for exit codes and error output.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Config(_) => "config",
            Error::Domain(_) => "domain",
            Error::Singularity { .. } => "singularity",
            Error::Divergence { .. } => "divergence",
            Error::Numeric(_) => "numeric",
            Error::Parse { .. } => "parse",
            Error::ModelFormat(_) => "model-format",
            Error::Training(_) => "training",
            Error::Filter(_) => "filter",
            Error::Io(_) => "io",
        }
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        if let csv::ErrorKind::Io(_) = e.kind() {
            return Error::Numeric(format!("csv io: {e}"));
        }
        let (line, path) = match e.kind() {
            csv::ErrorKind::Deserialize { pos, .. } | csv::ErrorKind::UnequalLengths { pos, .. } => {
                (pos.as_ref().map(|p| p.line()).unwrap_or(0), String::new())
            }
            _ => (0, String::new()),
        };
        Error::Parse {
            path,
            line,
            message: e.to_string(),
        }
    }
}
