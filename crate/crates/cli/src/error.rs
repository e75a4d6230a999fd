use std::fmt;
use std::path::Path;

/// Bad input files, flags or configuration.
pub const INPUT: u8 = 1;
/// An earlier pipeline stage has not been run.
pub const MISSING: u8 = 2;
/// A numerical or structural invariant broke inside the library.
pub const INTERNAL: u8 = 3;

#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

pub type CliResult<T> = Result<T, CliError>;

impl CliError {
    pub fn input(message: impl Into<String>) -> Self {
        Self { code: INPUT, message: message.into() }
    }

    pub fn missing(path: &Path, command: &str) -> Self {
        Self { code: MISSING, message: format!("{} not found; run `hgave {command}` first", path.display()) }
    }

    pub fn at(path: &Path, e: impl fmt::Display) -> Self {
        Self::input(format!("{}: {e}", path.display()))
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<hgave_core::Error> for CliError {
    fn from(e: hgave_core::Error) -> Self {
        use hgave_core::Error as E;
        let code = match e {
            E::UnknownNode(_) | E::Shape { .. } | E::NonFinite(_) | E::TapeConsumed | E::NotScalar(_) | E::ZeroVector => {
                INTERNAL
            }
            _ => INPUT,
        };
        Self { code, message: e.to_string() }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::input(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        Self::input(e.to_string())
    }
}
