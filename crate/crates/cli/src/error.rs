use std::fmt;

/// Failures mapped to the process exit status.
#[derive(Debug)]
pub enum CliError {
    /// Bad configuration, flags, or an unwritable output location.
    Config(String),
    Generation(String),
    Solver(String),
    MissingInput(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Generation(_) => 3,
            CliError::Solver(_) => 4,
            CliError::MissingInput(_) => 5,
        }
    }

    pub fn output(path: &std::path::Path, e: impl fmt::Display) -> Self {
        CliError::Config(format!("cannot write {}: {e}", path.display()))
    }

    pub fn input(path: &std::path::Path, e: impl fmt::Display) -> Self {
        CliError::MissingInput(format!("cannot read {}: {e}", path.display()))
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "configuration error: {m}"),
            CliError::Generation(m) => write!(f, "generation failed: {m}"),
            CliError::Solver(m) => write!(f, "solver failed: {m}"),
            CliError::MissingInput(m) => write!(f, "missing input: {m}"),
        }
    }
}

impl std::error::Error for CliError {}
