use std::path::PathBuf;

/// Everything a command can fail with.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] culb_core::Error),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: malformed JSON: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("container: {0}")]
    Container(String),
    #[error("invalid input: {0}")]
    Invalid(String),
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;

/// Process exit status for validation failures.
pub const EXIT_VALIDATION: u8 = 1;
/// Process exit status for failures while doing the work.
pub const EXIT_RUNTIME: u8 = 2;

impl CliError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io { path: path.into(), source }
    }

    pub fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        CliError::Json { path: path.into(), source }
    }

    pub fn exit_code(&self) -> u8 {
        use culb_core::Error as E;
        match self {
            CliError::Core(E::Config(_) | E::Precondition(_) | E::Infeasible(_) | E::WorldMismatch(_)) => EXIT_VALIDATION,
            CliError::Json { .. } | CliError::Invalid(_) => EXIT_VALIDATION,
            _ => EXIT_RUNTIME,
        }
    }
}
