//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("matrix values length {got} does not match rows*cols = {expected}")]
    BadShape { expected: usize, got: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite value at position {0}")]
    NonFinite(usize),
    #[error("precision must be 1..=8 bits, got {0}")]
    BadPrecision(u8),
    #[error("codebook must hold exactly {expected} centroids, got {got}")]
    BadCodebookLen { expected: usize, got: usize },
    #[error("codebook centroids must be sorted ascending")]
    UnsortedCodebook,
    #[error("index {index} out of codebook range (2^{bits} entries)")]
    IndexOutOfRange { index: u16, bits: u8 },
    #[error("scale must be positive and finite, got {0}")]
    BadScale(f64),
    #[error("zero point {zero_point} out of range for {bits} bits")]
    BadZeroPoint { zero_point: u8, bits: u8 },
    #[error("outlier positions must be strictly increasing and unique")]
    UnsortedOutliers,
    #[error("outlier position {position} out of range (length {length})")]
    OutlierOutOfRange { position: usize, length: usize },
    #[error("length mismatch: {0}")]
    LengthMismatch(String),
    #[error("empty input")]
    EmptyInput,
    #[error("sample weights must be non-negative with positive total")]
    BadWeights,
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("vector too short: length {len} < {min}")]
    TokenTooShort { len: usize, min: usize },
    #[error("degenerate calibration: lower threshold {lower} >= upper threshold {upper}")]
    DegenerateCalibration { lower: f64, upper: f64 },
    #[error("quantile range must satisfy hi > lo, got [{lo}, {hi}]")]
    BadRange { lo: f64, hi: f64 },
    #[error("k = {k} too large for {n} elements (need 2k <= n)")]
    KTooLarge { k: usize, n: usize },
    #[error("pop on an exhausted tree")]
    EmptyPop,
    #[error("function produced a non-finite value at centroid {centroid}")]
    NonFiniteMap { centroid: f64 },
    #[error("attached product table does not regenerate from the operand codebooks")]
    TableMismatch,
    #[error("bad container magic: expected \"KLLM\", found {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported container version {0}")]
    UnsupportedVersion(u8),
    #[error("unknown container type tag {0}")]
    UnknownTypeTag(u8),
    #[error("container truncated: needed {needed} more bytes")]
    Truncated { needed: usize },
    #[error("container has {0} trailing bytes past the payload")]
    TrailingBytes(usize),
    #[error("container holds a {got}, expected a {expected}")]
    WrongContainerType {
        expected: &'static str,
        got: &'static str,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
