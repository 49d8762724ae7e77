use crate::ring::Domain;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("domain mismatch: expected {expected:?}, found {found:?}")]
    DomainMismatch { expected: Domain, found: Domain },

    #[error("{what} out of range: {value}")]
    OutOfRange { what: &'static str, value: u64 },

    #[error("unsupported compression width d={0}")]
    UnsupportedBits(u8),

    #[error("seed must be {expected} bytes, got {found}")]
    SeedLength { expected: usize, found: usize },

    #[error("parameter mismatch: {0}")]
    ParamMismatch(String),

    #[error("schedule does not match the decryption datapath: {0}")]
    ScheduleMismatch(String),

    #[error("LFSR seed must be nonzero")]
    ZeroSeed,

    #[error("RPG machine already finished")]
    MachineDone,

    #[error("RPG seed stream exhausted")]
    SeedStreamExhausted,

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("length mismatch: {0}")]
    LengthMismatch(String),

    #[error("correlation undefined: constant input")]
    UndefinedCorrelation,

    #[error("unsupported: {0}")]
    Unsupported(&'static str),

    #[error("bad file format: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
