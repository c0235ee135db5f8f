use qholo::SimError;

/// CLI failures, each mapped to a process exit code.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("schema error at {key}: {message}")]
    Schema { key: String, message: String },
    #[error("unit error at {key}: {message}")]
    Unit { key: String, message: String },
    #[error("{0}")]
    UnknownKey(String),
    #[error("metadata mismatch: {0}")]
    MetadataMismatch(String),
    #[error("preflight failed: {0}")]
    Preflight(String),
    #[error("numerical failure: {0}")]
    Numerical(SimError),
    #[error("i/o error: {0}")]
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Schema { .. } | CliError::Unit { .. } | CliError::UnknownKey(_) | CliError::MetadataMismatch(_) => 2,
            CliError::Preflight(_) => 3,
            CliError::Numerical(_) => 4,
            CliError::Io(_) => 5,
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

/// Classifies a core error raised while running (after config validation).
pub fn runtime(e: SimError) -> CliError {
    match e {
        SimError::WindowTooSmall { .. } | SimError::Poling(_) => CliError::Preflight(e.to_string()),
        SimError::Checkpoint(m) => CliError::Io(format!("checkpoint: {m}")),
        SimError::ShapeMismatch(m) => CliError::MetadataMismatch(m),
        other => CliError::Numerical(other),
    }
}
