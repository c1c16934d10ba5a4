use std::path::PathBuf;

/// Errors produced anywhere in the toolkit.
///
/// Every variant maps to a stable short code (see [`Error::code`]) that the
/// command-line front end prints on stderr.
#[derive(thiserror::Error, Debug)]
pub enum Error {
    #[error("time axes differ ({left} vs {right})")]
    AxisMismatch { left: String, right: String },

    #[error("histogram has no signal mass")]
    ZeroMass,

    #[error("histogram has no signal; peak is undefined")]
    NoSignal,

    #[error("section count {sections} invalid for {bins} bins (need 1 <= M <= K/2)")]
    BadSectionCount { sections: usize, bins: usize },

    #[error("depth {depth} m outside representable range [0, {max}) m")]
    DepthOutOfRange { depth: f64, max: f64 },

    #[error("vector at pixel {index} is not unit length (norm {norm})")]
    NonUnitVector { index: usize, norm: f64 },

    #[error("non-positive depth {depth} at pixel {index}")]
    NonPositiveDepth { index: usize, depth: f64 },

    #[error("{width}x{height} not divisible by factor {factor}")]
    DimensionNotDivisible {
        width: usize,
        height: usize,
        factor: usize,
    },

    #[error("operation requires {expected} input")]
    WrongMode { expected: &'static str },

    #[error("mask selects no pixels")]
    EmptyMask,

    #[error("no pixel is valid after warping")]
    EmptyValidRegion,

    #[error("sequence lengths differ ({left} vs {right})")]
    LengthMismatch { left: usize, right: usize },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("file missing: {}", .0.display())]
    FileMissing(PathBuf),

    #[error("unknown depth unit {0:?}")]
    UnknownDepthUnit(String),

    #[error("invalid scene spec: {0}")]
    InvalidSpec(String),

    #[error("missing layer: {0}")]
    MissingLayer(String),

    #[error("method {method} unavailable: {reason}")]
    MethodUnavailable { method: String, reason: String },

    #[error("flow is required but absent for frame {frame}")]
    MissingFlow { frame: usize },

    #[error("malformed {kind} data: {detail}")]
    Format { kind: &'static str, detail: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("io error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// Stable machine-readable code for the error category.
    pub fn code(&self) -> &'static str {
        match self {
            Error::AxisMismatch { .. } => "AxisMismatch",
            Error::ZeroMass => "ZeroMass",
            Error::NoSignal => "NoSignal",
            Error::BadSectionCount { .. } => "BadSectionCount",
            Error::DepthOutOfRange { .. } => "DepthOutOfRange",
            Error::NonUnitVector { .. } => "NonUnitVector",
            Error::NonPositiveDepth { .. } => "NonPositiveDepth",
            Error::DimensionNotDivisible { .. } => "DimensionNotDivisible",
            Error::WrongMode { .. } => "WrongMode",
            Error::EmptyMask => "EmptyMask",
            Error::EmptyValidRegion => "EmptyValidRegion",
            Error::LengthMismatch { .. } => "LengthMismatch",
            Error::InvalidParameter(_) => "InvalidParameter",
            Error::ShapeMismatch(_) => "ShapeMismatch",
            Error::FileMissing(_) => "FileMissing",
            Error::UnknownDepthUnit(_) => "UnknownDepthUnit",
            Error::InvalidSpec(_) => "InvalidSpec",
            Error::MissingLayer(_) => "MissingLayer",
            Error::MethodUnavailable { .. } => "MethodUnavailable",
            Error::MissingFlow { .. } => "MissingFlow",
            Error::Format { .. } => "Format",
            Error::Config(_) => "Config",
            Error::Io { .. } => "IoFailure",
        }
    }

    /// Process exit status used by the binary.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io { .. } | Error::FileMissing(_) => 3,
            Error::Config(_) | Error::InvalidParameter(_) | Error::InvalidSpec(_) => 2,
            _ => 4,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(kind: &'static str, detail: impl Into<String>) -> Self {
        Error::Format {
            kind,
            detail: detail.into(),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
