use std::fmt;
use std::path::Path;

/// Failure of a command, reported on stderr as one JSON object.
#[derive(Debug)]
pub struct CliError {
    pub category: &'static str,
    pub message: String,
}

pub type CliResult<T> = Result<T, CliError>;

impl CliError {
    pub fn config(message: impl Into<String>) -> Self {
        Self {
            category: "config",
            message: message.into(),
        }
    }

    pub fn data(message: impl Into<String>) -> Self {
        Self {
            category: "data",
            message: message.into(),
        }
    }

    pub fn io(path: &Path, err: impl fmt::Display) -> Self {
        Self {
            category: "io",
            message: format!("{}: {err}", path.display()),
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self.category {
            "config" => 2,
            "data" => 3,
            "io" => 4,
            "format" => 5,
            "generation" => 6,
            _ => 1,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::json!({ "error": { "category": self.category, "message": self.message } }).to_string()
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.category, self.message)
    }
}

impl From<dynshift::Error> for CliError {
    fn from(e: dynshift::Error) -> Self {
        Self {
            category: e.category(),
            message: e.to_string(),
        }
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        Self {
            category: "internal",
            message: e.to_string(),
        }
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        Self {
            category: "io",
            message: e.to_string(),
        }
    }
}
