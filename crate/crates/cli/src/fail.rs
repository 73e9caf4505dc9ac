use std::fmt;

/// A failed command and the process exit code it maps to.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

pub const CONFIG: u8 = 2;
pub const NUMERIC: u8 = 3;
pub const UNCONVERGED: u8 = 4;
pub const EM: u8 = 5;

impl CliError {
    pub fn config(msg: impl Into<String>) -> Self {
        CliError {
            code: CONFIG,
            message: format!("config error: {}", msg.into()),
        }
    }

    pub fn numeric(msg: impl fmt::Display) -> Self {
        CliError {
            code: NUMERIC,
            message: format!("numeric failure: {msg}"),
        }
    }

    pub fn unconverged(what: &[String]) -> Self {
        CliError {
            code: UNCONVERGED,
            message: format!("unconverged: {}", what.join(", ")),
        }
    }

    pub fn em(msg: impl fmt::Display) -> Self {
        CliError {
            code: EM,
            message: format!("EM failure: {msg}"),
        }
    }

    /// File system trouble while writing outputs.
    pub fn io(path: &std::path::Path, e: impl fmt::Display) -> Self {
        CliError {
            code: NUMERIC,
            message: format!("cannot write {}: {e}", path.display()),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CliError {}

/// Library input errors are the caller's configuration; the rest are numeric.
impl From<marketirl::Error> for CliError {
    fn from(e: marketirl::Error) -> Self {
        use marketirl::Error as E;
        match e {
            E::Data(_) | E::Io(_) | E::Dimension { .. } | E::InvalidParameter(_) | E::LogNormalLimit => {
                CliError::config(e.to_string())
            }
            other => CliError::numeric(other),
        }
    }
}
