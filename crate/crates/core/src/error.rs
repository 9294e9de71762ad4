use thiserror::Error;

/// Errors raised across the pipeline.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("index out of range: {0}")]
    Index(String),
    #[error("mask contains no floor pixels")]
    NoFloor,
    #[error("invalid depth value at pixel {index}: {value}")]
    InvalidDepth { index: usize, value: f64 },
    #[error("malformed payload: {0}")]
    MalformedPayload(String),
    #[error("unknown client id `{0}`")]
    UnknownClient(String),
    #[error("invalid belt command: {0}")]
    InvalidCommand(String),
    #[error("scene error: {0}")]
    Scene(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("all paired differences are zero")]
    DegenerateSample,
    #[error("pgm: {0}")]
    Pgm(String),
    #[error("perception backend failed: {0}")]
    Perception(String),
    #[error("transport: {0}")]
    Transport(String),
    #[error("io: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
