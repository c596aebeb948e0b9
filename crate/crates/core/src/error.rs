use thiserror::Error;

/// Crate-wide error type.
///
/// Variants are grouped by the exit-code category the CLI maps them to:
/// configuration problems (exit 2), artifact problems such as missing or
/// corrupt files (exit 3), and internal invariant violations (exit 4).
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {context} (lhs {lhs:?}, rhs {rhs:?})")]
    Shape {
        context: String,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("index out of range: {context} (id {id}, limit {limit})")]
    Index {
        context: String,
        id: usize,
        limit: usize,
    },

    #[error("degenerate softmax row {row}: all entries are -inf")]
    DegenerateRow { row: usize },

    #[error("config error: {0}")]
    Config(String),

    #[error("state error: {0}")]
    State(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("io error at {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("internal invariant violated: {0}")]
    Internal(String),
}

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for this error per the CLI contract:
    /// 2 config, 3 artifact, 4 internal.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Data(_) => 2,
            Error::Checkpoint(_) | Error::Io { .. } => 3,
            _ => 4,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
