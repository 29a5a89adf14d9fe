use alloc::string::String;
use core::fmt;

/// Errors raised by the core algorithms.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// A configuration value or combination of values violates an invariant.
    InvalidConfig(String),
    /// Two operands disagree on a dimension.
    ShapeMismatch {
        what: &'static str,
        expected: usize,
        found: usize,
    },
    /// A softmax row has no attendable entry.
    FullyMaskedRow(usize),
    /// Entropy needs at least two keys.
    TooFewKeys(usize),
    /// A scale step outside `1..=K`.
    StepOutOfRange { step: usize, total: usize },
    /// Stage-aware remapping was asked for on a table without band labels.
    BandsUnassigned,
    /// An intervention targets a band that has no rotary pairs.
    EmptyBand(&'static str),
    /// Calibration is enabled but no reference entropies were supplied.
    MissingReference,
    /// A KV cache does not hold the rows expected before a step.
    CacheMismatch { expected: usize, found: usize },
}

pub type Result<T> = core::result::Result<T, Error>;

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::InvalidConfig(msg) => write!(f, "invalid configuration: {msg}"),
            Error::ShapeMismatch {
                what,
                expected,
                found,
            } => write!(f, "shape mismatch in {what}: expected {expected}, found {found}"),
            Error::FullyMaskedRow(row) => write!(f, "row {row} has no attendable entry"),
            Error::TooFewKeys(n) => write!(f, "normalized entropy needs at least 2 keys, got {n}"),
            Error::StepOutOfRange { step, total } => {
                write!(f, "scale step {step} outside 1..={total}")
            }
            Error::BandsUnassigned => write!(f, "frequency table has no band labels"),
            Error::EmptyBand(band) => write!(f, "band {band} has no rotary pairs"),
            Error::MissingReference => {
                write!(f, "calibration enabled but no reference entropy store given")
            }
            Error::CacheMismatch { expected, found } => {
                write!(f, "kv cache holds {found} rows, expected {expected}")
            }
        }
    }
}

impl core::error::Error for Error {}

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidConfig(msg.into())
}
