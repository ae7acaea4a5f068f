use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("degenerate attitude: body x-axis is {angle_from_vertical:e} rad from vertical")]
    DegenerateAttitude { angle_from_vertical: f64 },

    #[error("format error in {}: {msg}", path.as_ref().map(|p| p.display().to_string()).unwrap_or_else(|| "<stream>".into()))]
    Format { path: Option<PathBuf>, msg: String },

    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("point ({x}, {y}) is outside the terrain extent")]
    OutOfExtent { x: f64, y: f64 },

    #[error("cell has no candidates")]
    EmptyCell,

    #[error("degenerate ego distance {0:e}")]
    DegenerateDistance(f64),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("training diverged at step {step}: loss = {loss}")]
    Divergence { step: usize, loss: f64 },

    #[error("ill-conditioned covariance: {0}")]
    IllConditioned(String),

    #[error("empty mask for channel group {0}")]
    EmptyMask(&'static str),

    #[error("missing prediction for frame {0}")]
    MissingPrediction(String),
}

impl Error {
    pub(crate) fn format(msg: impl Into<String>) -> Self {
        Error::Format { path: None, msg: msg.into() }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Attaches a file path to format errors that were raised while decoding a stream.
    pub(crate) fn with_path(self, p: impl Into<PathBuf>) -> Self {
        match self {
            Error::Format { path: None, msg } => Error::Format { path: Some(p.into()), msg },
            other => other,
        }
    }
}
