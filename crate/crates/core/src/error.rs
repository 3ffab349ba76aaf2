use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

pub type Result<T, E = Error> = core::result::Result<T, E>;

/// Validation and numerical failures raised by the core algorithms.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    EmptyPool,
    EmptyExpertId { row: usize },
    DuplicateExpertId(String),
    InvalidCost { id: String, cost: f64 },
    MissingExpert(String),
    DimensionMismatch { context: &'static str, expected: usize, found: usize },
    OutOfRange { context: String, value: f64 },
    NonFinite { context: String },
    BasisTooLarge { requested: usize, available: usize },
    UnknownToken(u32),
    DuplicateToken(u32),
    ZeroVector { context: String },
    ZeroVariance { expert: String },
    NonUnitKey { index: usize, norm: f64 },
    InvalidK { k: usize, len: usize },
    TooManyBands { bands: usize, experts: usize },
    InvalidConfig(String),
    EmptyPositives { query: usize },
    NonFiniteLoss { queries: Vec<String> },
    EmptyTestSet,
    TooFewResamples(usize),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::EmptyPool => write!(f, "empty pool"),
            Error::EmptyExpertId { row } => write!(f, "expert id at row {row} is empty"),
            Error::DuplicateExpertId(id) => write!(f, "duplicate expert id \"{id}\""),
            Error::InvalidCost { id, cost } => {
                write!(f, "expert \"{id}\" has invalid cost {cost} (must be finite and >= 0)")
            }
            Error::MissingExpert(id) => write!(f, "missing expert \"{id}\""),
            Error::DimensionMismatch { context, expected, found } => {
                write!(f, "{context}: expected dimension {expected}, found {found}")
            }
            Error::OutOfRange { context, value } => write!(f, "{context}: value {value} out of range"),
            Error::NonFinite { context } => write!(f, "{context}: non-finite value"),
            Error::BasisTooLarge { requested, available } => write!(
                f,
                "token basis of size {requested} requested but only {available} tokens are available"
            ),
            Error::UnknownToken(t) => write!(f, "token {t} is not present in the probe tensor"),
            Error::DuplicateToken(t) => write!(f, "token {t} appears more than once"),
            Error::ZeroVector { context } => write!(f, "{context}: zero vector cannot be normalized"),
            Error::ZeroVariance { expert } => {
                write!(f, "expert \"{expert}\" has zero variance across probes")
            }
            Error::NonUnitKey { index, norm } => write!(f, "key {index} has norm {norm}, expected 1"),
            Error::InvalidK { k, len } => write!(f, "k = {k} is outside 1..={len}"),
            Error::TooManyBands { bands, experts } => {
                write!(f, "{bands} cost bands requested for {experts} experts")
            }
            Error::InvalidConfig(msg) => write!(f, "invalid configuration: {msg}"),
            Error::EmptyPositives { query } => write!(f, "query {query} has no positive expert"),
            Error::NonFiniteLoss { queries } => {
                write!(f, "non-finite loss in batch [{}]", queries.join(", "))
            }
            Error::EmptyTestSet => write!(f, "empty test set"),
            Error::TooFewResamples(n) => write!(f, "{n} bootstrap resamples requested, at least 100 required"),
        }
    }
}

impl core::error::Error for Error {}
