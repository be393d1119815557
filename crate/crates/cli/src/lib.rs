//! Command implementations behind the `cogfactor` binary.

pub mod commands;
pub mod config;

use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("missing input file `{}`", .0.display())]
    MissingInput(PathBuf),
    #[error(transparent)]
    Library(#[from] cogfactor::Error),
}

impl CliError {
    /// 1 for numerical failures, 2 for usage, configuration and I/O problems.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::MissingInput(_) => 2,
            CliError::Library(e) => library_exit_code(e),
        }
    }
}

fn library_exit_code(e: &cogfactor::Error) -> i32 {
    use cogfactor::Error as E;
    match e {
        E::Io { .. } | E::Parse { .. } | E::Config(_) | E::Dimension(_) | E::Empty(_) => 2,
        E::Sampler { source, .. } => library_exit_code(source),
        _ => 1,
    }
}

pub type CliResult<T> = Result<T, CliError>;
