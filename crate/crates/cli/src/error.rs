use std::path::PathBuf;

/// Failures surfaced by the command layer, each mapped to a process exit code.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("checkpoint {}: {reason}", path.display())]
    Checkpoint { path: PathBuf, reason: String },

    #[error("missing checkpoint {}; run `moelab pretrain` first or set the path in [paths]", .0.display())]
    MissingCheckpoint(PathBuf),

    #[error("output directory {} is in use by another run (remove {} if that run is gone)", dir.display(), lock.display())]
    Locked { dir: PathBuf, lock: PathBuf },

    #[error(transparent)]
    Core(#[from] moelab::Error),
}

impl CliError {
    pub const EXIT_CONFIG: i32 = 2;
    pub const EXIT_IO: i32 = 3;
    pub const EXIT_CONTRACT: i32 = 4;

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => Self::EXIT_CONFIG,
            CliError::Io { .. }
            | CliError::Checkpoint { .. }
            | CliError::MissingCheckpoint(_)
            | CliError::Locked { .. } => Self::EXIT_IO,
            CliError::Core(moelab::Error::Io { .. } | moelab::Error::Ingestion { .. }) => Self::EXIT_IO,
            CliError::Core(_) => Self::EXIT_CONTRACT,
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;
