use std::path::PathBuf;

/// Errors surfaced by the command-line layer.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] pidiff_core::Error),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {msg}")]
    ConfigLine {
        path: String,
        line: usize,
        msg: String,
    },
    #[error("{0}")]
    Dataset(String),
    #[error("{0}")]
    Usage(String),
}

pub type CliResult<T> = Result<T, CliError>;

impl CliError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }

    /// Stable category tag used in the one-line error report.
    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Core(e) => match e {
                pidiff_core::Error::Shape { .. } => "shape",
                pidiff_core::Error::Contract(_) => "contract",
                pidiff_core::Error::Range(_) => "range",
                pidiff_core::Error::Format(_) => "format",
                pidiff_core::Error::Config(_) => "config",
            },
            CliError::Io { .. } => "io",
            CliError::ConfigLine { .. } => "config",
            CliError::Dataset(_) => "dataset",
            CliError::Usage(_) => "usage",
        }
    }

    /// `error[kind]: message` on a single line.
    pub fn report(&self) -> String {
        let msg = self.to_string().replace(['\n', '\r'], " ");
        format!("error[{}]: {}", self.kind(), msg.trim())
    }
}
