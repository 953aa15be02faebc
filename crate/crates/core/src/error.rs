use thiserror::Error;

/// Errors surfaced by every module of the crate.
#[derive(Debug, Error)]
pub enum LsrError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("backward requires a scalar output, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("variable does not belong to this graph")]
    ForeignVar,
    #[error("function is not deterministic: {first} vs {second}")]
    NonDeterministic { first: f64, second: f64 },
    #[error("invalid config field `{field}`: {reason}")]
    InvalidConfig { field: String, reason: String },
    #[error("{what} out of range: {value}")]
    OutOfRange { what: &'static str, value: f64 },
    #[error("empty input to {0}")]
    Empty(&'static str),
    #[error("group mixes labels or classes: {0}")]
    MixedGroup(String),
    #[error("low-resolution label {0} not present in count table")]
    UnknownLabel(usize),
    #[error("group of size {size} is smaller than the minimum {min}")]
    GroupTooSmall { size: usize, min: usize },
    #[error("alpha must lie in (0, 1], got {0}")]
    InvalidAlpha(f64),
    #[error("under-sampled bins (fewer than {min} blocks): {bins:?}")]
    UnderSampledBins { bins: Vec<usize>, min: usize },
    #[error("no low-resolution label has enough blocks to form a group of {0}")]
    NoEligibleLabel(usize),
    #[error("empty evaluation band: ground truth has no class boundary")]
    EmptyBand,
    #[error("non-binary mask value {0}")]
    NonBinaryMask(u8),
    #[error("training diverged at step {step}: loss {loss}")]
    Divergence { step: usize, loss: f64 },
    #[error("malformed {what}: {reason}")]
    Format { what: &'static str, reason: String },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl LsrError {
    pub fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        LsrError::InvalidConfig {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub fn format(what: &'static str, reason: impl Into<String>) -> Self {
        LsrError::Format {
            what,
            reason: reason.into(),
        }
    }

    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        LsrError::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, LsrError>;
