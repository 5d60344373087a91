use thiserror::Error;

use crate::overlay::NodeId;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid overlay parameters: {0}")]
    Overlay(String),
    #[error("{0:?} and {1:?} are not connected")]
    NotAnEdge(NodeId, NodeId),
    #[error("invalid latency model: {0}")]
    Latency(String),
    #[error("malformed observation on ({0:?}, {1:?}): delay {2} ms is negative")]
    NegativeDelay(NodeId, NodeId, f64),
    #[error("embedding: {0}")]
    Embedding(String),
    #[error("clustering: {0}")]
    Cluster(String),
    #[error("relay table for {0:?}: {1}")]
    RelayTable(NodeId, String),
    #[error("relay table decode: {0}")]
    Decode(String),
    #[error("adversary configuration: {0}")]
    Adversary(String),
    #[error("config error at `{path}`{line}: {message}", line = .line.map(|l| format!(" (line {l})")).unwrap_or_default())]
    Config {
        path: String,
        line: Option<usize>,
        message: String,
    },
    #[error("transaction {tx} missed {missing} honest nodes")]
    Undelivered { tx: u32, missing: usize },
    #[error("unknown transaction {0}")]
    UnknownTx(u32),
    #[error("empty sample set")]
    EmptySamples,
    #[error("unknown preset `{0}`")]
    UnknownPreset(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn config(path: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            path: path.into(),
            line: None,
            message: message.into(),
        }
    }
}
