use std::path::PathBuf;

use thiserror::Error;

/// One broken dataset rule, tied to the entry that broke it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub entry: String,
    pub rule: String,
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "entry {}: {}", self.entry, self.rule)
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed document: {0}")]
    Malformed(String),

    #[error("unknown schema_version {0}")]
    UnknownSchemaVersion(u32),

    #[error("{}", format_violations(.0))]
    Invariant(Vec<Violation>),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("duplicate edit id {0:?}")]
    DuplicateEdit(String),

    #[error("edit memory is empty")]
    EmptyMemory,

    #[error(
        "unknown threshold operator {0:?} (expected one of mu-1sigma, mu-1.5sigma, mu-2sigma, mu-2.5sigma, mu-3sigma)"
    )]
    UnknownOperator(String),

    #[error("edit_prompt called with a non-activating router verdict")]
    NotActivating,

    #[error("protocol order violation: {0}")]
    ProtocolOrder(String),

    #[error("no pseudo-label for prompt {prompt_id} seed {seed}")]
    MissingLabel { prompt_id: String, seed: u64 },

    #[error("writing {0}")]
    Output(String),

    #[error("score cache miss: {0}")]
    CacheMiss(String),

    #[error("backend error: {0}")]
    Backend(String),

    #[error("unparseable model response: {0}")]
    UnparseableResponse(String),
}

fn format_violations(violations: &[Violation]) -> String {
    let lines: Vec<String> = violations.iter().map(ToString::to_string).collect();
    format!("dataset invariant violated: {}", lines.join("; "))
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Failures of an external model, service or cache, as opposed to bad input data.
    pub fn is_backend(&self) -> bool {
        matches!(
            self,
            Error::CacheMiss(_) | Error::Backend(_) | Error::UnparseableResponse(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
