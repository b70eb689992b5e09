use std::fmt;

use fedroam::data::DataError;
use fedroam::netproto::NetError;

pub const EXIT_INTERNAL: i32 = 1;
pub const EXIT_BAD_INPUT: i32 = 2;
pub const EXIT_PROTOCOL: i32 = 3;

/// An error tagged with the exit code it maps to.
#[derive(Debug)]
pub enum Failure {
    BadInput(anyhow::Error),
    Protocol(anyhow::Error),
    Internal(anyhow::Error),
}

impl Failure {
    pub fn exit_code(&self) -> i32 {
        match self {
            Failure::BadInput(_) => EXIT_BAD_INPUT,
            Failure::Protocol(_) => EXIT_PROTOCOL,
            Failure::Internal(_) => EXIT_INTERNAL,
        }
    }

    pub fn error(&self) -> &anyhow::Error {
        match self {
            Failure::BadInput(e) | Failure::Protocol(e) | Failure::Internal(e) => e,
        }
    }

    pub fn bad_input(msg: impl fmt::Display) -> Self {
        Failure::BadInput(anyhow::anyhow!("{msg}"))
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:#}", self.error())
    }
}

impl From<DataError> for Failure {
    fn from(e: DataError) -> Self {
        // every dataset error traces back to a path or a value the user gave
        Failure::BadInput(e.into())
    }
}

impl From<NetError> for Failure {
    fn from(e: NetError) -> Self {
        match e {
            NetError::Connect { .. } => Failure::Protocol(e.into()),
            NetError::Io(_) => Failure::Internal(e.into()),
            e if e.is_protocol() => Failure::Protocol(e.into()),
            e => Failure::Internal(e.into()),
        }
    }
}

pub trait Context<T> {
    fn bad_input(self, what: impl fmt::Display) -> Result<T, Failure>;
    fn internal(self, what: impl fmt::Display) -> Result<T, Failure>;
}

impl<T, E: Into<anyhow::Error>> Context<T> for Result<T, E> {
    fn bad_input(self, what: impl fmt::Display) -> Result<T, Failure> {
        self.map_err(|e| Failure::BadInput(e.into().context(what.to_string())))
    }

    fn internal(self, what: impl fmt::Display) -> Result<T, Failure> {
        self.map_err(|e| Failure::Internal(e.into().context(what.to_string())))
    }
}
