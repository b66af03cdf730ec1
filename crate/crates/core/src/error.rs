use thiserror::Error;

/// Failure modes of the weight-file reader. Each has a distinct code so
/// tooling can tell them apart.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WeightFileErrorKind {
    BadMagic,
    Truncated,
    DimensionMismatch,
    UnknownLayerTag,
    ChecksumMismatch,
    InvalidNetwork,
}

impl WeightFileErrorKind {
    pub fn code(self) -> u8 {
        match self {
            Self::BadMagic => 10,
            Self::Truncated => 11,
            Self::DimensionMismatch => 12,
            Self::UnknownLayerTag => 13,
            Self::ChecksumMismatch => 14,
            Self::InvalidNetwork => 15,
        }
    }
}

impl std::fmt::Display for WeightFileErrorKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Self::BadMagic => "bad magic",
            Self::Truncated => "truncated payload",
            Self::DimensionMismatch => "dimension mismatch",
            Self::UnknownLayerTag => "unknown layer tag",
            Self::ChecksumMismatch => "checksum mismatch",
            Self::InvalidNetwork => "invalid network",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Error)]
pub enum GdError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("non-finite value produced by layer {layer}")]
    NonFinite { layer: usize },
    #[error("weight file: {kind} ({detail})")]
    WeightFile {
        kind: WeightFileErrorKind,
        detail: String,
    },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("concept absent: '{0}' has zero base rate")]
    ZeroBaseRate(String),
    #[error("unknown concept '{0}'")]
    UnknownConcept(String),
    #[error("optimizer diverged at step {step}")]
    Diverged { step: usize, log: Vec<String> },
    #[error("json parse error at byte {offset}: {message}")]
    Json { offset: usize, message: String },
    #[error("schema mismatch: expected '{expected}', found '{found}'")]
    Schema { expected: String, found: String },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl GdError {
    pub(crate) fn weight(kind: WeightFileErrorKind, detail: impl Into<String>) -> Self {
        Self::WeightFile {
            kind,
            detail: detail.into(),
        }
    }
}

pub type Result<T, E = GdError> = std::result::Result<T, E>;
