use std::path::PathBuf;

use thiserror::Error;

/// Process exit codes. Usage errors (unknown flags and the like) exit with
/// clap's code 2.
pub mod exit {
    pub const OK: u8 = 0;
    pub const OTHER: u8 = 1;
    pub const CONFIG: u8 = 3;
    pub const DATA: u8 = 4;
    pub const NUMERIC: u8 = 5;
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("invalid config: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error(transparent)]
    Core(#[from] gradlibra::Error),

    #[error("cannot write {}: {source}", path.display())]
    Output {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        use gradlibra::Error as E;
        match self {
            CliError::Config(_) => exit::CONFIG,
            CliError::Data(_) => exit::DATA,
            CliError::Output { .. } => exit::OTHER,
            CliError::Core(e) => match e {
                E::Config(_) | E::UnsupportedArch(_) => exit::CONFIG,
                E::NonFinite { .. } => exit::NUMERIC,
                E::InvalidInput(_)
                | E::Dimension(_)
                | E::Parse { .. }
                | E::UndefinedAp(_)
                | E::Io { .. }
                | E::Json(_) => exit::DATA,
            },
        }
    }
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;
