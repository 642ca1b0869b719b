use alloc::string::String;

/// Errors produced anywhere in the authentication pipeline.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("degenerate linear fit: subcarrier indices are all equal")]
    DegenerateFit,
    #[error("schema error: missing field `{0}`")]
    Schema(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("cannot normalize a zero vector")]
    Normalization,
    #[error("state error: {0}")]
    State(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("solver did not converge after {iterations} iterations (violation {violation:e})")]
    Convergence { iterations: usize, violation: f64 },
    #[error("id `{0}` is already registered")]
    Conflict(String),
    #[error("unknown claimed id `{0}`")]
    UnknownId(String),
}

pub type Result<T> = core::result::Result<T, Error>;
