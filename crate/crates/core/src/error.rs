use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Every failure the engine can report.
///
/// Variants map one-to-one onto the stable error codes returned by the HTTP
/// service, see [`Error::code`].
#[derive(Debug, Error)]
pub enum Error {
    #[error("bad magic: expected \"CLT1\", found {found:?}")]
    BadMagic { found: [u8; 4] },

    #[error("unsupported trace version {0}")]
    UnsupportedVersion(u32),

    #[error("truncated file: header implies {expected} bytes, found {actual}")]
    TruncatedFile { expected: u64, actual: u64 },

    #[error("non-finite value in {field} at flat index {index}")]
    NonFiniteValue { field: &'static str, index: usize },

    #[error("invariant violation on {field}: {message}")]
    InvariantViolation { field: &'static str, message: String },

    #[error("i/o failure on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("unknown category {name:?}{}", line.map(|l| format!(" at line {l}")).unwrap_or_default())]
    UnknownCategory { name: String, line: Option<usize> },

    #[error("dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },

    #[error("span [{start}, {end}) out of range for {tokens} answer tokens")]
    SpanOutOfRange { start: usize, end: usize, tokens: usize },

    #[error("layer {layer} out of range for {layers} layers")]
    LayerOutOfRange { layer: usize, layers: usize },

    #[error("score map is empty")]
    EmptyMap,

    #[error("trace has no unembedding matrix")]
    MissingUnembedding,

    #[error("trace has no answer token ids")]
    MissingTokenIds,

    #[error("trace has no output probabilities")]
    MissingOutputProbs,

    #[error("no positive (hallucinated) records{}", category.as_ref().map(|c| format!(" in category {c}")).unwrap_or_default())]
    NoPositives { category: Option<String> },

    #[error("trace {trace} has no hallucination label")]
    MissingLabel { trace: String },

    #[error("heatmap is {heatmap_w}x{heatmap_h} but mask is {mask_w}x{mask_h}")]
    DimMismatch {
        heatmap_w: usize,
        heatmap_h: usize,
        mask_w: usize,
        mask_h: usize,
    },

    #[error("ground-truth mask has no foreground pixels")]
    EmptyForeground,

    #[error("category {0} has no usable validation records")]
    EmptyCategory(String),

    #[error("no categories remain after holding out {0}")]
    NoOtherCategories(String),

    #[error("invalid synth spec: {0}")]
    InvalidSpec(String),

    #[error("trace has no ground-truth mask")]
    MissingMask,

    #[error("invalid argument {field}: {message}")]
    InvalidArgument { field: &'static str, message: String },
}

impl Error {
    /// Stable machine-readable code used by the service layer.
    pub fn code(&self) -> &'static str {
        match self {
            Error::BadMagic { .. } => "BadMagic",
            Error::UnsupportedVersion(_) => "UnsupportedVersion",
            Error::TruncatedFile { .. } => "TruncatedFile",
            Error::NonFiniteValue { .. } => "NonFiniteValue",
            Error::InvariantViolation { .. } => "InvariantViolation",
            Error::Io { .. } => "IoFailure",
            Error::Parse { .. } => "ParseError",
            Error::UnknownCategory { .. } => "UnknownCategory",
            Error::DimensionMismatch { .. } => "DimensionMismatch",
            Error::SpanOutOfRange { .. } => "SpanOutOfRange",
            Error::LayerOutOfRange { .. } => "LayerOutOfRange",
            Error::EmptyMap => "EmptyMap",
            Error::MissingUnembedding => "MissingUnembedding",
            Error::MissingTokenIds => "MissingTokenIds",
            Error::MissingOutputProbs => "MissingOutputProbs",
            Error::NoPositives { .. } => "NoPositives",
            Error::MissingLabel { .. } => "MissingLabel",
            Error::DimMismatch { .. } => "DimMismatch",
            Error::EmptyForeground => "EmptyForeground",
            Error::EmptyCategory(_) => "EmptyCategory",
            Error::NoOtherCategories(_) => "NoOtherCategories",
            Error::InvalidSpec(_) => "InvalidSpec",
            Error::MissingMask => "MissingMask",
            Error::InvalidArgument { .. } => "InvalidArgument",
        }
    }

    /// The offending field, when the error names one.
    pub fn field(&self) -> Option<&str> {
        match self {
            Error::NonFiniteValue { field, .. }
            | Error::InvariantViolation { field, .. }
            | Error::InvalidArgument { field, .. } => Some(field),
            Error::SpanOutOfRange { .. } => Some("span"),
            Error::LayerOutOfRange { .. } => Some("layer"),
            Error::UnknownCategory { .. } => Some("category"),
            Error::MissingUnembedding | Error::MissingTokenIds => Some("unembedding"),
            Error::MissingOutputProbs => Some("output_probs"),
            Error::MissingMask | Error::EmptyForeground => Some("gt_mask"),
            Error::MissingLabel { .. } => Some("label"),
            _ => None,
        }
    }

    pub(crate) fn invariant(field: &'static str, message: impl Into<String>) -> Self {
        Error::InvariantViolation {
            field,
            message: message.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
