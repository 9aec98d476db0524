//! Crate-wide error type and the exit-code contract used by the binary.
//!
//! Fallible *boundaries* (files, configs, checkpoints, run preconditions)
//! return `Error`. Shape violations inside tape ops are caller bugs and
//! panic with a descriptive message instead; they are not recoverable.

use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Bad or inconsistent configuration / usage. Exit code 2.
    #[error("config: {0}")]
    Config(String),

    /// Underlying filesystem failure. Exit code 3.
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Malformed file contents (header/payload/manifest). Exit code 3.
    #[error("{path}: {msg}")]
    Format { path: PathBuf, msg: String },

    /// A NaN/Inf surfaced where a finite number is required. Exit code 4.
    #[error("non-finite value: {0}")]
    NonFinite(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub fn format(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Format { path: path.into(), msg: msg.into() }
    }

    /// Process exit code for the CLI: 2 config, 3 I/O or format, 4 non-finite.
    /// (0 = success and 1 = failed verification are decided by the caller.)
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Io { .. } | Error::Format { .. } => 3,
            Error::NonFinite(_) => 4,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_follow_the_contract() {
        assert_eq!(Error::Config("x".into()).exit_code(), 2);
        let io = Error::io("/tmp/x", std::io::Error::new(std::io::ErrorKind::NotFound, "gone"));
        assert_eq!(io.exit_code(), 3);
        assert_eq!(Error::format("/tmp/x", "broken").exit_code(), 3);
        assert_eq!(Error::NonFinite("loss".into()).exit_code(), 4);
    }
}
