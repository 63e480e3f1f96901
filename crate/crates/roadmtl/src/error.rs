use thiserror::Error;

/// Errors produced by the roadmtl library.
///
/// Each variant carries a stable machine-readable code (see [`Error::code`])
/// that the CLI prints as a single-line prefix on failure.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor or feature-map shape does not match what an operation requires.
    #[error("shape error in {op}: {msg}")]
    Shape { op: String, msg: String },

    /// Configuration values are inconsistent or out of range.
    #[error("config error: {0}")]
    Config(String),

    /// Input data is malformed (bad mask values, missing files, broken manifest rows).
    #[error("data error: {0}")]
    Data(String),

    /// An operation was called outside its contract (wrong mode, empty input, bad scale).
    #[error("contract violation in {op}: {msg}")]
    Contract { op: String, msg: String },

    #[error("i/o error{}: {source}", ctx_suffix(.ctx))]
    Io {
        ctx: String,
        #[source]
        source: std::io::Error,
    },

    /// Checkpoint file is corrupt or from an incompatible version.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
}

fn ctx_suffix(ctx: &str) -> String {
    if ctx.is_empty() {
        String::new()
    } else {
        format!(" ({ctx})")
    }
}

impl Error {
    pub fn shape(op: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Shape {
            op: op.into(),
            msg: msg.into(),
        }
    }

    pub fn contract(op: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Contract {
            op: op.into(),
            msg: msg.into(),
        }
    }

    pub fn io(ctx: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            ctx: ctx.into(),
            source,
        }
    }

    /// Stable error code used as the machine-parsable CLI prefix.
    pub fn code(&self) -> &'static str {
        match self {
            Error::Shape { .. } => "E_SHAPE",
            Error::Config(_) => "E_CONFIG",
            Error::Data(_) => "E_DATA",
            Error::Contract { .. } => "E_CONTRACT",
            Error::Io { .. } => "E_IO",
            Error::Checkpoint(_) => "E_CKPT",
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::io("", e)
    }
}

pub type Result<T> = std::result::Result<T, Error>;
