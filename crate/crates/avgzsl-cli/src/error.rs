//! CLI error taxonomy mapped to exit codes, with a machine-readable JSON
//! rendering on stderr: 2 usage, 3 missing dependency, 4 numerical
//! divergence, 1 anything else.

use std::fmt;

#[derive(Debug)]
pub struct CliError {
    pub kind: ErrorKind,
    pub message: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ErrorKind {
    /// Bad flags or config contents.
    Usage,
    /// A prerequisite artifact (checkpoint, dataset) is missing.
    Dependency,
    /// Training produced non-finite losses.
    Divergence,
    /// IO and other runtime failures.
    Runtime,
}

pub type CliResult<T> = Result<T, CliError>;

impl CliError {
    pub fn usage(message: impl Into<String>) -> CliError {
        CliError { kind: ErrorKind::Usage, message: message.into() }
    }

    pub fn dependency(message: impl Into<String>) -> CliError {
        CliError { kind: ErrorKind::Dependency, message: message.into() }
    }

    pub fn runtime(message: impl Into<String>) -> CliError {
        CliError { kind: ErrorKind::Runtime, message: message.into() }
    }

    pub fn exit_code(&self) -> u8 {
        match self.kind {
            ErrorKind::Usage => 2,
            ErrorKind::Dependency => 3,
            ErrorKind::Divergence => 4,
            ErrorKind::Runtime => 1,
        }
    }

    pub fn kind_label(&self) -> &'static str {
        match self.kind {
            ErrorKind::Usage => "usage",
            ErrorKind::Dependency => "dependency",
            ErrorKind::Divergence => "divergence",
            ErrorKind::Runtime => "runtime",
        }
    }

    /// One-line JSON object for scripted callers.
    pub fn to_json(&self) -> String {
        serde_json::json!({
            "error": { "kind": self.kind_label(), "message": self.message }
        })
        .to_string()
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.kind_label(), self.message)
    }
}

impl From<avgzsl::Error> for CliError {
    fn from(err: avgzsl::Error) -> CliError {
        let kind = match &err {
            avgzsl::Error::Config(_) => ErrorKind::Usage,
            avgzsl::Error::Diverged(_) => ErrorKind::Divergence,
            _ => ErrorKind::Runtime,
        };
        CliError { kind, message: err.to_string() }
    }
}
