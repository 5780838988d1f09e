//! Crate-wide error type.
//!
//! Every failure mode carries a stable machine-readable code (see
//! [`Error::code`]) and a distinct process exit code (see
//! [`Error::exit_code`]) so the CLI can report errors in a single
//! parseable line.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// A required ordering between values was violated (e.g. eta1 >= eta2).
    #[error("ordering violation: {0}")]
    Ordering(String),

    /// A numeric parameter fell outside its documented range.
    #[error("out of range: {0}")]
    Range(String),

    /// Matrix or token-count mismatch between operands.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// A NaN or infinity showed up where finite values are required.
    #[error("non-finite value: {0}")]
    NonFinite(String),

    /// Contextual attention invoked with no keys at all.
    #[error("empty attention context: {0}")]
    EmptyContext(String),

    /// A mask row blocks every key, leaving softmax undefined.
    #[error("attention mask row {0} is fully masked")]
    AllMasked(usize),

    /// Model specification invariant violated.
    #[error("model spec: {0}")]
    Spec(String),

    /// Block profiling requested with an empty foreground set.
    #[error("empty foreground token set")]
    EmptyForeground,

    /// Vital-block selection asked for more blocks than a stage contains.
    #[error("count exceeds available blocks: {0}")]
    Count(String),

    /// Layout document is missing a field or has an ill-typed field.
    #[error("schema: {0}")]
    Schema(String),

    /// Layout validation failed in strict mode.
    #[error("validation failed: {0}")]
    Validation(String),

    /// A region box contains no patch centers.
    #[error("empty region: {0}")]
    EmptyRegion(String),

    /// A contextual update lost all of its context streams.
    #[error("degenerate context: {0}")]
    DegenerateContext(String),

    /// Alpha estimation has no background ring to take a scale from.
    #[error("empty background ring")]
    EmptyRing,

    /// Layers handed to a compositing step out of occlusion order.
    #[error("layer order: {0}")]
    Order(String),

    /// Tensor dump file is malformed.
    #[error("dump format: {0}")]
    Format(String),

    /// Run configuration is inconsistent.
    #[error("config: {0}")]
    Config(String),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Stable machine-readable code, printed by the CLI as `code=<...>`.
    pub fn code(&self) -> &'static str {
        match self {
            Error::Ordering(_) => "OrderingError",
            Error::Range(_) => "RangeError",
            Error::Shape(_) => "ShapeError",
            Error::NonFinite(_) => "NonFiniteError",
            Error::EmptyContext(_) => "EmptyContextError",
            Error::AllMasked(_) => "AllMaskedError",
            Error::Spec(_) => "SpecError",
            Error::EmptyForeground => "EmptyForegroundError",
            Error::Count(_) => "CountError",
            Error::Schema(_) => "SchemaError",
            Error::Validation(_) => "ValidationError",
            Error::EmptyRegion(_) => "EmptyRegionError",
            Error::DegenerateContext(_) => "DegenerateContextError",
            Error::EmptyRing => "EmptyRingError",
            Error::Order(_) => "OrderError",
            Error::Format(_) => "FormatError",
            Error::Config(_) => "ConfigError",
            Error::Io(_) => "IoError",
        }
    }

    /// Distinct process exit code per variant (documented in the README).
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Ordering(_) => 10,
            Error::Range(_) => 11,
            Error::Shape(_) => 12,
            Error::NonFinite(_) => 13,
            Error::EmptyContext(_) => 14,
            Error::AllMasked(_) => 15,
            Error::Spec(_) => 16,
            Error::EmptyForeground => 17,
            Error::Count(_) => 18,
            Error::Schema(_) => 19,
            Error::Validation(_) => 20,
            Error::EmptyRegion(_) => 21,
            Error::DegenerateContext(_) => 22,
            Error::EmptyRing => 23,
            Error::Order(_) => 24,
            Error::Format(_) => 25,
            Error::Config(_) => 26,
            Error::Io(_) => 27,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
