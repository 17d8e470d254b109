use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("dimension mismatch in {op}: expected {expected}, got {got}")]
    Dim {
        op: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("k = {k} out of range 1..={max}")]
    KOutOfRange { k: usize, max: usize },

    #[error("router kind {got} cannot be used for {op}")]
    WrongRouter { op: &'static str, got: &'static str },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("invalid argument: {0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, Error>;
