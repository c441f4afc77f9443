use std::path::PathBuf;

/// Errors raised anywhere in the estimation pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Dimension {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },

    #[error("domain error in {op}: {detail}")]
    Domain { op: &'static str, detail: String },

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("non-finite gradient for parameter `{param}`")]
    Optimizer { param: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("load error in {path}: {detail}")]
    Load { path: String, detail: String },

    #[error("overlap violation: {0}")]
    Overlap(String),

    #[error("degenerate sample weights: {0}")]
    DegenerateWeights(String),

    #[error("training diverged: non-finite `{term}` at iteration {iteration}")]
    Divergence { term: String, iteration: usize },

    #[error("not supported: {0}")]
    NotSupported(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn load(path: impl std::fmt::Display, detail: impl Into<String>) -> Self {
        Error::Load {
            path: path.to_string(),
            detail: detail.into(),
        }
    }

    /// Process exit code for the command-line runner.
    ///
    /// 2 config, 3 data, 4 numerical divergence, 1 anything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Load { .. } | Error::Io { .. } | Error::Protocol(_) | Error::Overlap(_) => 3,
            Error::Divergence { .. } | Error::Optimizer { .. } | Error::DegenerateWeights(_) => 4,
            _ => 1,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
