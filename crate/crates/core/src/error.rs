use std::path::PathBuf;

/// Every failure the toolkit can report. Variant names double as the
/// machine-readable error class printed by the CLI.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("empty input: {0}")]
    EmptyInput(String),
    #[error("layer index {index} out of range for {layers} layers")]
    LayerIndex { index: usize, layers: usize },
    #[error("invalid value: {0}")]
    Value(String),
    #[error("plan error: {0}")]
    Plan(String),
    #[error("search error: objective returned {value} at alpha={alpha}")]
    Search { alpha: f64, value: f64 },
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("training diverged at step {step}: loss={loss}")]
    Train { step: usize, loss: f64 },
    #[error("integrity error: {0}")]
    Integrity(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("unsupported version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("json error in {}: {source}", path.display())]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    /// Short class name, stable across releases.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape(_) => "ShapeError",
            Error::EmptyInput(_) => "EmptyInputError",
            Error::LayerIndex { .. } => "LayerIndexError",
            Error::Value(_) => "ValueError",
            Error::Plan(_) => "PlanError",
            Error::Search { .. } => "SearchError",
            Error::Config(_) => "ConfigError",
            Error::Data(_) => "DataError",
            Error::Train { .. } => "TrainError",
            Error::Integrity(_) => "IntegrityError",
            Error::Format(_) => "FormatError",
            Error::Version { .. } => "VersionError",
            Error::Io { .. } => "IoError",
            Error::Json { .. } => "JsonError",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
