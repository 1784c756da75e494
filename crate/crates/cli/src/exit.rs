//! Exit-code contract: 0 ok, 2 configuration, 3 numerical, 4 provenance.

use std::fmt;

use mdclosure::Error;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Code {
    Other = 1,
    Config = 2,
    Numerical = 3,
    Provenance = 4,
}

#[derive(Debug)]
pub struct Failure {
    pub code: Code,
    pub error: anyhow::Error,
}

impl Failure {
    pub fn config(error: impl Into<anyhow::Error>) -> Self {
        Failure { code: Code::Config, error: error.into() }
    }
    pub fn provenance(error: impl Into<anyhow::Error>) -> Self {
        Failure { code: Code::Provenance, error: error.into() }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:#}", self.error)
    }
}

/// Classify by the first library error found in the chain.
pub fn classify(e: &anyhow::Error) -> Code {
    for cause in e.chain() {
        if let Some(err) = cause.downcast_ref::<Error>() {
            return match err {
                Error::NonFinite | Error::Blowup { .. } | Error::Divergence { .. } | Error::Consistency(_) => {
                    Code::Numerical
                }
                Error::Io(_) => Code::Other,
                _ => Code::Config,
            };
        }
        if cause.downcast_ref::<serde_json::Error>().is_some() {
            return Code::Config;
        }
    }
    Code::Other
}

impl From<anyhow::Error> for Failure {
    fn from(error: anyhow::Error) -> Self {
        Failure { code: classify(&error), error }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        anyhow::Error::from(e).into()
    }
}

// only reached when serializing our own output
impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure { code: Code::Other, error: e.into() }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure { code: Code::Other, error: e.into() }
    }
}
