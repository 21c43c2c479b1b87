use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch{}: {msg}", layer_suffix(*.layer))]
    Shape { msg: String, layer: Option<usize> },

    #[error("index {index} out of range (bound {bound}) in {context}")]
    Index {
        index: usize,
        bound: usize,
        context: &'static str,
    },

    #[error("invalid input: {0}")]
    Validation(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("training diverged at epoch {epoch}, batch {batch}: {msg}")]
    Diverged {
        epoch: usize,
        batch: usize,
        msg: String,
    },

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("metric undefined for group {group}: {msg}")]
    MetricUndefined { group: String, msg: String },

    #[error("key `{0}` not found in frozen feature table")]
    MissingKey(String),

    #[error("featurizer state error: {0}")]
    State(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("schema error: {0}")]
    Schema(String),

    #[error("sampling error: {0}")]
    Sampling(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

fn layer_suffix(layer: Option<usize>) -> String {
    match layer {
        Some(i) => format!(" at layer {i}"),
        None => String::new(),
    }
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape {
            msg: msg.into(),
            layer: None,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the command-line front end.
    ///
    /// 1 config, 2 numeric failure, 3 data/schema, 4 unsupported operation.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Usage(_) | Error::Json(_) => 1,
            Error::NonFinite(_)
            | Error::Diverged { .. }
            | Error::Degenerate(_)
            | Error::MetricUndefined { .. } => 2,
            Error::Unsupported(_) => 4,
            Error::Shape { .. }
            | Error::Index { .. }
            | Error::Validation(_)
            | Error::MissingKey(_)
            | Error::State(_)
            | Error::Parse { .. }
            | Error::Schema(_)
            | Error::Sampling(_)
            | Error::Io { .. } => 3,
        }
    }
}
