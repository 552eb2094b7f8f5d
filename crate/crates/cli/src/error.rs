use std::path::PathBuf;

use thiserror::Error;

/// Errors of the command-line driver. Every variant maps to a fixed exit
/// code; see [`CliError::exit_code`].
#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),

    #[error("missing {}: run `maskscope {stage}` first", path.display())]
    MissingPrerequisite { path: PathBuf, stage: &'static str },

    #[error(
        "run directory is locked by {}: another maskscope process is writing there (delete the file if none is)",
        path.display()
    )]
    Locked { path: PathBuf },

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Core(#[from] maskscope::Error),
}

pub type Result<T> = std::result::Result<T, CliError>;

pub mod exit {
    pub const OK: i32 = 0;
    // 2 is clap's usage-error code.
    pub const CONFIG: i32 = 3;
    pub const PREREQUISITE: i32 = 4;
    pub const LOCKED: i32 = 5;
    pub const IO: i32 = 6;
    /// Unreadable, corrupted or mutually inconsistent input files.
    pub const CORRUPT_INPUT: i32 = 7;
    pub const NUMERICAL: i32 = 8;
}

impl CliError {
    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        CliError::Io {
            context: context.into(),
            source,
        }
    }

    pub fn exit_code(&self) -> i32 {
        use maskscope::Error as E;
        match self {
            CliError::Config(_) => exit::CONFIG,
            CliError::MissingPrerequisite { .. } => exit::PREREQUISITE,
            CliError::Locked { .. } => exit::LOCKED,
            CliError::Io { .. } => exit::IO,
            CliError::Core(e) => match e {
                E::Config(_) | E::InvalidOrder(_) | E::Domain(_) | E::Basis(_) => exit::CONFIG,
                E::Io(_) => exit::IO,
                E::Version { .. }
                | E::Magic(_)
                | E::Truncated(_)
                | E::Checksum { .. }
                | E::Shape(_) => exit::CORRUPT_INPUT,
                E::NonFiniteLoss { .. }
                | E::Partition(_)
                | E::DegenerateLabels(_)
                | E::Clustering(_)
                | E::InsufficientTraces { .. } => exit::NUMERICAL,
            },
        }
    }
}
