use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    // store
    #[error("duplicate record id `{0}`")]
    DuplicateRecordId(String),
    #[error("malformed record: {0}")]
    MalformedRecord(String),
    #[error("unknown user `{0}`")]
    UnknownUser(String),
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("user `{0}` is locked by another writer")]
    Locked(String),
    #[error("invalid persona database: {0}")]
    InvalidDatabase(String),

    // gateway
    #[error("backend unavailable after {attempts} attempt(s): {reason}")]
    BackendUnavailable { attempts: u32, reason: String },
    #[error("transcript has no entry for request digest {0}")]
    TranscriptMiss(String),
    #[error("provider stopped on output length for prompt `{0}`")]
    OutputTruncated(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),

    // refine
    #[error("user `{0}` has an empty history")]
    EmptyHistory(String),
    #[error("analyzer output for `{prompt}` did not parse after repair: {reason}")]
    AnalyzerParseFailure { prompt: String, reason: String },

    // collab / retrieve
    #[error("user `{0}` has an empty cache layer")]
    EmptyCache(String),
    #[error("zero-norm vector")]
    ZeroNormVector,
    #[error("no collaborator candidates for `{0}`")]
    NoCandidates(String),

    // infer
    #[error("template error: {0}")]
    TemplateError(String),

    // eval
    #[error("degenerate series: {0}")]
    DegenerateSeries(String),
    #[error("empty series")]
    EmptySeries,

    // synth
    #[error("invalid synthetic config: {0}")]
    InvalidConfig(String),
    #[error("unknown task `{0}`")]
    UnknownTask(String),

    // cli
    #[error("config error: {0}")]
    ConfigError(String),

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Stable machine-readable name of the error variant.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::DuplicateRecordId(_) => "DuplicateRecordId",
            Error::MalformedRecord(_) => "MalformedRecord",
            Error::UnknownUser(_) => "UnknownUser",
            Error::DimensionMismatch { .. } => "DimensionMismatch",
            Error::Locked(_) => "Locked",
            Error::InvalidDatabase(_) => "InvalidDatabase",
            Error::BackendUnavailable { .. } => "BackendUnavailable",
            Error::TranscriptMiss(_) => "TranscriptMiss",
            Error::OutputTruncated(_) => "OutputTruncated",
            Error::InvalidRequest(_) => "InvalidRequest",
            Error::EmptyHistory(_) => "EmptyHistory",
            Error::AnalyzerParseFailure { .. } => "AnalyzerParseFailure",
            Error::EmptyCache(_) => "EmptyCache",
            Error::ZeroNormVector => "ZeroNormVector",
            Error::NoCandidates(_) => "NoCandidates",
            Error::TemplateError(_) => "TemplateError",
            Error::DegenerateSeries(_) => "DegenerateSeries",
            Error::EmptySeries => "EmptySeries",
            Error::InvalidConfig(_) => "InvalidConfig",
            Error::UnknownTask(_) => "UnknownTask",
            Error::ConfigError(_) => "ConfigError",
            Error::Io { .. } => "Io",
            Error::Json(_) => "Json",
        }
    }
}
