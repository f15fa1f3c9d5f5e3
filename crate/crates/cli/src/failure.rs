use std::fmt;

/// Why a command failed; decides the process exit code.
#[derive(Debug)]
pub enum Failure {
    /// Bad input: config, arguments or input files. Exit 1.
    Invalid(String),
    /// The backend or the filesystem failed while doing valid work. Exit 2.
    Runtime(String),
}

impl Failure {
    pub fn exit_code(&self) -> u8 {
        match self {
            Failure::Invalid(_) => 1,
            Failure::Runtime(_) => 2,
        }
    }

    pub fn invalid(msg: impl Into<String>) -> Self {
        Failure::Invalid(msg.into())
    }

    pub fn runtime(msg: impl Into<String>) -> Self {
        Failure::Runtime(msg.into())
    }

    /// Classify an engine error raised while running a command.
    pub fn from_engine(e: trajguide::Error) -> Self {
        use trajguide::Error::*;
        match e {
            Validation(_) | Capability(_) | Shape { .. } | Json(_) => Failure::Invalid(e.to_string()),
            Io(_) | Internal(_) => Failure::Runtime(e.to_string()),
        }
    }

    /// An engine error raised while reading user-supplied input.
    pub fn reading(what: &std::path::Path, e: impl fmt::Display) -> Self {
        Failure::Invalid(format!("{}: {e}", what.display()))
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Invalid(m) => write!(f, "invalid input: {m}"),
            Failure::Runtime(m) => write!(f, "runtime failure: {m}"),
        }
    }
}

pub type CmdResult<T> = std::result::Result<T, Failure>;
