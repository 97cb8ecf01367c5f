use std::path::PathBuf;

use thiserror::Error;

use crate::task::TaskKind;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Dimension {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("domain error in {op}: {msg}")]
    Domain { op: &'static str, msg: String },

    #[error("degenerate input to {op}: {msg}")]
    Degenerate { op: &'static str, msg: String },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("no valid samples for {task} in this batch")]
    EmptyBatch { task: TaskKind },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("validation error at line {line}, field `{field}`: {msg}")]
    Validation {
        line: usize,
        field: String,
        msg: String,
    },

    #[error("conflicting records for {video_id}/{frame_index}: {first} vs {second}")]
    Conflict {
        video_id: String,
        frame_index: u32,
        first: String,
        second: String,
    },

    #[error("missing features for {} frame(s): {}", .0.len(), preview_keys(.0))]
    MissingFrames(Vec<(String, u32)>),

    #[error("non-finite gradient in parameter `{param}`")]
    NonFinite { param: String },

    #[error("integrity error: {0}")]
    Integrity(String),

    #[error("format error in {path}: {msg}")]
    Format { path: PathBuf, msg: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

fn preview_keys(keys: &[(String, u32)]) -> String {
    let mut out: Vec<String> = keys
        .iter()
        .take(8)
        .map(|(v, f)| format!("{v}/{f}"))
        .collect();
    if keys.len() > 8 {
        out.push("...".into());
    }
    out.join(", ")
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            msg: msg.into(),
        }
    }

    /// True for errors caused by bad input or configuration rather than a
    /// failure while running.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Config(_)
                | Error::Parse { .. }
                | Error::Validation { .. }
                | Error::Conflict { .. }
                | Error::Integrity(_)
        )
    }
}
