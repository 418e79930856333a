use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    },

    #[error("column {column} is degenerate (norm {norm:e} below 1e-12)")]
    DegenerateColumn { column: usize, norm: f64 },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("class index {index} out of range for {num_classes} classes")]
    InvalidClass { index: usize, num_classes: usize },

    #[error("backward already ran on this tape; record a fresh forward pass")]
    BackwardTwice,

    #[error("backward root must be a 1x1 scalar, got {0:?}")]
    NotScalar((usize, usize)),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("invalid data: {0}")]
    InvalidData(String),

    #[error("lower-level parameters were not restored bit-exactly after the hypergradient probe")]
    RestoreFailure,

    #[error("unsupported problem: {0}")]
    Unsupported(String),

    #[error("degenerate statistic: {0}")]
    Degenerate(String),

    #[error("all paired differences are zero")]
    AllZeroDifferences,

    #[error("need at least {needed} non-zero paired differences, got {got}")]
    TooFewPairs { needed: usize, got: usize },

    #[error("missing artifact {0}")]
    MissingArtifact(PathBuf),

    #[error("{context}: {source}")]
    AtStep {
        context: String,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("config parse error: {0}")]
    Toml(#[from] toml::de::Error),

    #[error("config serialization error: {0}")]
    TomlSer(#[from] toml::ser::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Attach step/phase context to an error raised during training.
    pub fn at(self, context: impl Into<String>) -> Self {
        Error::AtStep {
            context: context.into(),
            source: Box::new(self),
        }
    }

    /// Unwraps any step context to the underlying error.
    pub fn root(&self) -> &Error {
        match self {
            Error::AtStep { source, .. } => source.root(),
            other => other,
        }
    }
}
