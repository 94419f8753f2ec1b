use std::path::PathBuf;

/// Errors of the file layer and the command line, with their process exit codes.
#[derive(Debug, thiserror::Error)]
pub enum FoleyError {
    #[error("{0}")]
    Args(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: corrupt file: {reason}")]
    Corrupt { path: PathBuf, reason: String },
    #[error("{path}: unsupported format version {found} (this build reads {supported})")]
    UnsupportedVersion { path: PathBuf, found: u32, supported: u32 },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error(transparent)]
    Core(#[from] foley_core::Error),
}

impl FoleyError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }

    pub fn corrupt(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Self::Corrupt {
            path: path.into(),
            reason: reason.into(),
        }
    }

    pub fn exit_code(&self) -> i32 {
        use foley_core::Error as E;
        match self {
            Self::Args(_) => 2,
            Self::Io { .. } | Self::Corrupt { .. } | Self::UnsupportedVersion { .. } | Self::Json { .. } => 3,
            Self::Core(E::Parameter(_) | E::Config(_) | E::Index { .. }) => 2,
            Self::Core(E::Data(_)) => 3,
            Self::Core(_) => 4,
        }
    }
}

pub type Result<T, E = FoleyError> = std::result::Result<T, E>;
