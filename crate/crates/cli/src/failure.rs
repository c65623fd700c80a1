use std::fmt;
use std::path::Path;

/// A command failure, classified by exit code.
#[derive(Debug)]
pub enum Failure {
    /// Bad configuration or arguments (exit 2).
    Config(String),
    /// The numerics failed (exit 3).
    Numeric(String),
    /// Reading or writing files failed (exit 4).
    Io(String),
}

impl Failure {
    pub fn io(path: &Path, e: impl fmt::Display) -> Self {
        Failure::Io(format!("{}: {e}", path.display()))
    }

    pub fn exit_code(&self) -> u8 {
        match self {
            Failure::Config(_) => 2,
            Failure::Numeric(_) => 3,
            Failure::Io(_) => 4,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Config(m) => write!(f, "config error: {m}"),
            Failure::Numeric(m) => write!(f, "numeric failure: {m}"),
            Failure::Io(m) => write!(f, "io error: {m}"),
        }
    }
}

impl From<dppflow::Error> for Failure {
    fn from(e: dppflow::Error) -> Self {
        match e {
            dppflow::Error::Io { .. } => Failure::Io(e.to_string()),
            ref err if err.is_numeric() => Failure::Numeric(e.to_string()),
            _ => Failure::Config(e.to_string()),
        }
    }
}
