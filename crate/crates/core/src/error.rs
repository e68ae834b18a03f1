use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("malformed qid in `{field}`: {value:?} (expected Q followed by digits)")]
    MalformedQid { field: &'static str, value: String },

    #[error("empty mention in `{field}`")]
    EmptyMention { field: &'static str },

    #[error("invalid value for `{field}`: {reason}")]
    InvalidField { field: &'static str, reason: String },

    // agent gateway
    #[error("backend unreachable: {0}")]
    BackendUnreachable(String),

    #[error("backend refused request with status {status}: {body}")]
    BackendRefused { status: u16, body: String },

    #[error("vision request carries no image")]
    ImageMissing,

    #[error("image supplied to a non-vision role")]
    UnexpectedImage,

    #[error("empty prompt")]
    EmptyPrompt,

    #[error("no scripted reply for {role} prompt {prompt_hash}")]
    NoScriptedReply { role: String, prompt_hash: String },

    // modal fuser
    #[error("mention context is empty")]
    EmptyContext,

    #[error("reply violates the expected output format: {0}")]
    FormatViolation(String),

    #[error("mention has neither an image nor an image description")]
    NoVisualInput,

    #[error("mention has no summary to fuse")]
    MissingSummary,

    #[error("mention has no fused description")]
    MissingFusedDescription,

    // knowledge graph
    #[error("knowledge graph unreachable: {0}")]
    KgUnreachable(String),

    #[error("cache miss in offline mode for {operation} {key:?}")]
    CacheMiss { operation: String, key: String },

    #[error("malformed knowledge graph response: {0}")]
    MalformedResponse(String),

    #[error("entity {0} not found")]
    NotFound(String),

    // similarity
    #[error("text tokenizes to zero tokens")]
    EmptyText,

    #[error("scorer unreachable: {0}")]
    ScorerUnreachable(String),

    #[error("scorer protocol error: {0}")]
    ScorerProtocolError(String),

    #[error("unknown {kind} `{name}`")]
    UnknownStrategy { kind: &'static str, name: String },

    // candidate adapter / clozer
    #[error("search returned no candidates for {0:?}")]
    EmptyCandidates(String),

    #[error("no option index found in reply {0:?}")]
    ParseFailure(String),

    #[error("option {index} outside 1..={k}")]
    OutOfRange { index: i64, k: usize },

    // evaluation
    #[error("no results to score")]
    EmptyResults,

    #[error("{} malformed line(s) in {}: {}", .errors.len(), .path.display(), summarize_lines(.errors))]
    Ingestion { path: PathBuf, errors: Vec<LineError> },

    #[error("config error: {0}")]
    Config(String),

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io { context: context.into(), source }
    }

    pub(crate) fn invalid(field: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidField { field, reason: reason.into() }
    }
}

/// A dataset line that failed to parse or validate.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LineError {
    pub line: usize,
    pub message: String,
}

fn summarize_lines(errors: &[LineError]) -> String {
    errors.iter().map(|e| format!("line {}: {}", e.line, e.message)).collect::<Vec<_>>().join("; ")
}
