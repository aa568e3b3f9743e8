use std::fmt;
use std::path::PathBuf;

/// Everything that can go wrong while loading inputs or running a selection.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("budget k={k} out of range for pool of {n} (need 1 <= k <= n)")]
    BudgetOutOfRange { k: usize, n: usize },

    #[error("token stats count {stats} does not match pool size {n}")]
    LengthMismatch { stats: usize, n: usize },

    #[error("embedding entry ({row}, {col}) is not finite")]
    NonFiniteEmbedding { row: usize, col: usize },

    #[error("embedding shape invalid: {0}")]
    BadShape(String),

    #[error("dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },

    #[error("row {row} has zero norm; cosine similarity undefined")]
    ZeroNormRow { row: usize },

    #[error("prompt {prompt} step {step}: chosen_prob is zero")]
    ZeroProbability { prompt: usize, step: usize },

    #[error("shifted uncertainty for item {index} is negative ({value})")]
    NegativeShiftedUncertainty { index: usize, value: f64 },

    #[error("invalid kernel: {0}")]
    InvalidKernel(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("index {index} out of range for pool of {n}")]
    IndexOutOfRange { index: usize, n: usize },

    #[error("no gain curves given")]
    EmptyCurveSet,

    #[error("instance too large for exhaustive search: {0}")]
    InstanceTooLarge(String),

    #[error("input validation failed: {0}")]
    Invalid(Violations),

    #[error("{path}: bad magic {found:?}")]
    MagicMismatch { path: PathBuf, found: [u8; 4] },

    #[error("{path}: unsupported format version {found}")]
    UnsupportedVersion { path: PathBuf, found: u32 },

    #[error("{path}: truncated payload ({detail})")]
    TruncatedPayload { path: PathBuf, detail: String },

    #[error("{path}: {detail}")]
    InvariantViolation { path: PathBuf, detail: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    /// Short stable name of the variant, for surfacing through other front ends.
    pub fn name(&self) -> &'static str {
        match self {
            Error::BudgetOutOfRange { .. } => "BudgetOutOfRange",
            Error::LengthMismatch { .. } => "LengthMismatch",
            Error::NonFiniteEmbedding { .. } => "NonFiniteEmbedding",
            Error::BadShape(_) => "BadShape",
            Error::DimensionMismatch { .. } => "DimensionMismatch",
            Error::ZeroNormRow { .. } => "ZeroNormRow",
            Error::ZeroProbability { .. } => "ZeroProbability",
            Error::NegativeShiftedUncertainty { .. } => "NegativeShiftedUncertainty",
            Error::InvalidKernel(_) => "InvalidKernel",
            Error::InvalidParameter(_) => "InvalidParameter",
            Error::IndexOutOfRange { .. } => "IndexOutOfRange",
            Error::EmptyCurveSet => "EmptyCurveSet",
            Error::InstanceTooLarge(_) => "InstanceTooLarge",
            Error::Invalid(_) => "Invalid",
            Error::MagicMismatch { .. } => "MagicMismatch",
            Error::UnsupportedVersion { .. } => "UnsupportedVersion",
            Error::TruncatedPayload { .. } => "TruncatedPayload",
            Error::InvariantViolation { .. } => "InvariantViolation",
            Error::Io { .. } => "Io",
        }
    }
}

/// A single failed check found by [`validate_inputs`](crate::validate_inputs).
#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    BudgetOutOfRange { k: usize, n: usize },
    LengthMismatch { stats: usize, n: usize },
    MissingEmbeddings,
    MissingTokenStats,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::BudgetOutOfRange { k, n } => {
                write!(f, "BudgetOutOfRange: k={k} with n={n}")
            }
            Violation::LengthMismatch { stats, n } => {
                write!(f, "LengthMismatch: {stats} stats records for n={n}")
            }
            Violation::MissingEmbeddings => f.write_str("MissingEmbeddings: strategy needs embeddings"),
            Violation::MissingTokenStats => f.write_str("MissingTokenStats: strategy needs token stats"),
        }
    }
}

/// Every violation found in one validation pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Violations(pub Vec<Violation>);

impl fmt::Display for Violations {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, v) in self.0.iter().enumerate() {
            if i > 0 {
                f.write_str("; ")?;
            }
            write!(f, "{v}")?;
        }
        Ok(())
    }
}
