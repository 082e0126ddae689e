use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, CirlError>;

#[derive(Debug, Error)]
pub enum CirlError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid state: {0}")]
    InvalidState(String),

    #[error("non-finite gradient for parameter `{parameter}`")]
    NonFiniteGradient { parameter: String },

    #[error("{stage} diverged at iteration {iteration} (recent losses: {recent:?})")]
    Divergence {
        stage: &'static str,
        iteration: usize,
        recent: Vec<f64>,
    },

    #[error("non-finite sample weight for record {record}")]
    NonFiniteWeight { record: String },

    #[error("degenerate projection direction (norm {norm:e})")]
    DegenerateDirection { norm: f64 },

    #[error("{source_name}:{line}: {message}")]
    Parse {
        source_name: String,
        line: usize,
        message: String,
    },

    #[error("unsupported format version `{found}` (expected `{expected}`)")]
    FormatVersion { found: String, expected: String },

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("overlap violated at {count} timestep(s); refit with force to override")]
    OverlapViolation { count: usize },

    #[error("missing artifact {}; run `cirl {producer}` first", path.display())]
    MissingArtifact { path: PathBuf, producer: &'static str },

    /// `origin` is a file path or `command line`; `line` counts from 1.
    #[error("config error at {origin}:{line}: {message}")]
    Config {
        origin: String,
        line: usize,
        message: String,
    },

    #[error("CIRL iteration {iteration}: {source}")]
    AtIteration {
        iteration: usize,
        #[source]
        source: Box<CirlError>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl CirlError {
    pub fn invalid(msg: impl Into<String>) -> Self {
        CirlError::InvalidArgument(msg.into())
    }

    pub fn parse(source_name: impl Into<String>, line: usize, message: impl Into<String>) -> Self {
        CirlError::Parse {
            source_name: source_name.into(),
            line,
            message: message.into(),
        }
    }

    /// Process exit code for the CLI; one code per error category.
    pub fn exit_code(&self) -> i32 {
        match self {
            CirlError::InvalidArgument(_) | CirlError::Config { .. } => 2,
            CirlError::Parse { .. } | CirlError::FormatVersion { .. } | CirlError::Validation(_) => 3,
            CirlError::MissingArtifact { .. } => 4,
            CirlError::NonFiniteGradient { .. }
            | CirlError::Divergence { .. }
            | CirlError::NonFiniteWeight { .. }
            | CirlError::DegenerateDirection { .. } => 5,
            CirlError::InvalidState(_) | CirlError::OverlapViolation { .. } => 6,
            CirlError::Io(_) => 7,
            CirlError::AtIteration { source, .. } => source.exit_code(),
        }
    }
}
