use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Errors raised by the analysis toolkit.
///
/// Variants fall into three groups: container format problems
/// (`BadMagic` .. `NonFinite`), invalid inputs to an analysis
/// operation, and numerical degeneracies.
#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("bad magic bytes {found:?}, expected \"PATS\"")]
    BadMagic { found: [u8; 4] },

    #[error("unsupported container version {0}")]
    UnsupportedVersion(u32),

    #[error("truncated payload: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },

    #[error("malformed header: {0}")]
    InvalidHeader(String),

    #[error("header/payload shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("non-finite value in section {section} at element {index}")]
    NonFinite { section: String, index: usize },

    #[error("row {row} of section {section} sums to {sum:.6}, outside tolerance {tol:e}")]
    RowSumOutOfTolerance {
        section: String,
        row: usize,
        sum: f64,
        tol: f64,
    },

    #[error("trace has no CLS token")]
    NoClsToken,

    #[error("operation requires full attention storage, trace is cls_reduced")]
    ClsReducedStorage,

    #[error("wrong trace kind: expected {expected}, found {found}")]
    WrongKind {
        expected: &'static str,
        found: &'static str,
    },

    #[error("layer {0} is not present in the trace")]
    LayerNotFound(usize),

    #[error("index out of range: {0}")]
    OutOfRange(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("negative probability {value} at index {index}")]
    NegativeProbability { index: usize, value: f64 },

    #[error("degenerate distribution: {0}")]
    DegenerateDistribution(String),

    #[error("phase detection needs at least 8 layers, trace has {0}")]
    TooFewLayers(usize),

    #[error("degenerate kernel: {0}")]
    DegenerateKernel(String),

    #[error("kernel is not positive semidefinite: {0}")]
    NotPsd(String),

    #[error("every token in row {row} is suppressed")]
    AllSuppressed { row: usize },

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("unknown image ids: {}", .0.join(", "))]
    UnknownImageIds(Vec<String>),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Stable machine-readable name of the variant, used in JSON diagnostics.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Io { .. } => "Io",
            Error::BadMagic { .. } => "BadMagic",
            Error::UnsupportedVersion(_) => "UnsupportedVersion",
            Error::Truncated { .. } => "Truncated",
            Error::InvalidHeader(_) => "InvalidHeader",
            Error::ShapeMismatch(_) => "ShapeMismatch",
            Error::NonFinite { .. } => "NonFinite",
            Error::RowSumOutOfTolerance { .. } => "RowSumOutOfTolerance",
            Error::NoClsToken => "NoClsToken",
            Error::ClsReducedStorage => "ClsReducedStorage",
            Error::WrongKind { .. } => "WrongKind",
            Error::LayerNotFound(_) => "LayerNotFound",
            Error::OutOfRange(_) => "OutOfRange",
            Error::InvalidArgument(_) => "InvalidArgument",
            Error::NegativeProbability { .. } => "NegativeProbability",
            Error::DegenerateDistribution(_) => "DegenerateDistribution",
            Error::TooFewLayers(_) => "TooFewLayers",
            Error::DegenerateKernel(_) => "DegenerateKernel",
            Error::NotPsd(_) => "NotPsd",
            Error::AllSuppressed { .. } => "AllSuppressed",
            Error::EmptyInput(_) => "EmptyInput",
            Error::UnknownImageIds(_) => "UnknownImageIds",
            Error::Json(_) => "Json",
        }
    }

    /// True for errors caused by malformed input data rather than bad arguments.
    pub fn is_data_format(&self) -> bool {
        matches!(
            self,
            Error::BadMagic { .. }
                | Error::UnsupportedVersion(_)
                | Error::Truncated { .. }
                | Error::InvalidHeader(_)
                | Error::ShapeMismatch(_)
                | Error::NonFinite { .. }
                | Error::RowSumOutOfTolerance { .. }
                | Error::Json(_)
                | Error::UnknownImageIds(_)
        )
    }
}
