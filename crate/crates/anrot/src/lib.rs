//! Command-line harness: configuration files, manifests, and the
//! subcommand implementations over `anrot-core`.

pub mod cli;
pub mod config;
pub mod manifest;
pub mod run;

/// Failures after argument parsing, split by exit code: configuration
/// problems exit 3, runtime failures exit 4. Usage errors are clap's
/// domain and exit 2.
#[derive(Debug)]
pub enum CliError {
    Config(String),
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 3,
            CliError::Runtime(_) => 4,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            CliError::Config(m) | CliError::Runtime(m) => m,
        }
    }
}
