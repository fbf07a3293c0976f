use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = VmgError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum VmgError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A non-finite value showed up where a finite one is required.
    #[error("numeric fault in {location}: {detail}")]
    NumericFault { location: String, detail: String },

    #[error("parse error at record {record}: {detail}")]
    Parse { record: usize, detail: String },

    #[error("schema error: {0}")]
    Schema(String),

    #[error("state error: {0}")]
    State(String),

    #[error("planning error: {0}")]
    Planning(String),

    #[error("config error: {key} {constraint}")]
    Config { key: String, constraint: String },

    #[error("stage `{stage}`: artifact {path} does not match its recorded hash")]
    HashMismatch { stage: String, path: PathBuf },

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<VmgError>,
    },

    #[error("internal consistency error: {0}")]
    Internal(String),

    #[error("at env step {step}: {source}")]
    AtStep {
        step: usize,
        #[source]
        source: Box<VmgError>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl VmgError {
    pub fn invalid(msg: impl Into<String>) -> Self {
        VmgError::InvalidArgument(msg.into())
    }

    pub fn config(key: impl Into<String>, constraint: impl Into<String>) -> Self {
        VmgError::Config {
            key: key.into(),
            constraint: constraint.into(),
        }
    }
}
