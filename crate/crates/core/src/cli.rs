//! Shared command-line plumbing: exit codes, logging to stdout and one JSON
//! error object per failure on stderr.

use std::fmt;
use std::process::ExitCode;

use crate::config::ConfigErrors;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Runtime,
    Divergence,
}

impl ErrorKind {
    pub fn code(self) -> u8 {
        match self {
            Self::Config => 2,
            Self::Runtime => 3,
            Self::Divergence => 4,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Config => "config",
            Self::Runtime => "runtime",
            Self::Divergence => "divergence",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Failure {
    pub kind: ErrorKind,
    pub message: String,
    /// Individual problems, e.g. every config issue.
    pub details: Vec<String>,
}

impl Failure {
    pub fn config(message: impl fmt::Display) -> Self {
        Self { kind: ErrorKind::Config, message: message.to_string(), details: Vec::new() }
    }

    pub fn runtime(message: impl fmt::Display) -> Self {
        Self { kind: ErrorKind::Runtime, message: message.to_string(), details: Vec::new() }
    }

    pub fn divergence(message: impl fmt::Display) -> Self {
        Self { kind: ErrorKind::Divergence, message: message.to_string(), details: Vec::new() }
    }

    pub fn to_json(&self) -> String {
        serde_json::json!({
            "error": self.kind.as_str(),
            "exit_code": self.kind.code(),
            "message": self.message,
            "details": self.details,
        })
        .to_string()
    }
}

impl From<ConfigErrors> for Failure {
    fn from(e: ConfigErrors) -> Self {
        Self {
            kind: ErrorKind::Config,
            message: format!("{} config error(s)", e.0.len()),
            details: e.0.iter().map(|i| i.to_string()).collect(),
        }
    }
}

/// Progress goes to stdout through `log`; `RUST_LOG` overrides the level.
pub fn init_logging() {
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .target(env_logger::Target::Stdout)
        .format_timestamp(None)
        .try_init();
}

/// Runs a command body and maps its outcome to an exit code.
pub fn run(body: impl FnOnce() -> Result<(), Failure>) -> ExitCode {
    init_logging();
    match body() {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("{}", f.to_json());
            ExitCode::from(f.kind.code())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::parse_config_str;

    #[test]
    fn config_errors_keep_every_issue() {
        let e = parse_config_str("a = 1\nb = 2\n").unwrap_err();
        let f = Failure::from(e);
        assert_eq!(f.kind.code(), 2);
        assert_eq!(f.details.len(), 2);
        let js: serde_json::Value = serde_json::from_str(&f.to_json()).unwrap();
        assert_eq!(js["error"], "config");
        assert_eq!(js["details"][1].as_str().unwrap(), f.details[1]);
    }
}
