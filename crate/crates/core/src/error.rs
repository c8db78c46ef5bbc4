use std::path::PathBuf;

/// Errors produced anywhere in the pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("json error in {context}: {source}")]
    Json {
        context: String,
        #[source]
        source: serde_json::Error,
    },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid format: {0}")]
    Format(String),
    #[error("blob length mismatch: expected {expected} bytes, found {found}")]
    Length { expected: u64, found: u64 },
    #[error("timestamps must be strictly increasing: {0}")]
    Ordering(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("empty input: {0}")]
    Empty(String),
    #[error("integration diverged at step {step}")]
    Diverged { step: usize },
    #[error("training diverged: {0}")]
    TrainingDiverged(String),
    #[error("missing retained activations: run forward before backward")]
    NoActivations,
}

impl Error {
    /// Short stable tag used by the CLI and the C ABI.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Io { .. } => "io",
            Error::Json { .. } => "json",
            Error::Shape(_) => "shape",
            Error::Format(_) => "format",
            Error::Length { .. } => "length",
            Error::Ordering(_) => "ordering",
            Error::Config(_) => "config",
            Error::Empty(_) => "empty",
            Error::Diverged { .. } | Error::TrainingDiverged(_) => "diverged",
            Error::NoActivations => "state",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(context: impl Into<String>, source: serde_json::Error) -> Self {
        Error::Json {
            context: context.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
