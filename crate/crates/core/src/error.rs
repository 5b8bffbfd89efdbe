use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: dimension mismatch between {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error("input error: {0}")]
    Input(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("{op} produced a non-finite value")]
    NonFinite { op: &'static str },

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("integrity error: {0}")]
    Integrity(String),

    #[error(transparent)]
    Format(#[from] FormatError),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    /// Whether the failure is numeric (NaN, divergence, failed gradient check)
    /// rather than a problem with the data or the request.
    pub fn is_numeric(&self) -> bool {
        matches!(self, Error::NonFinite { .. } | Error::Numeric(_))
    }
}

/// Failures decoding the on-disk raster and checkpoint formats. Each variant
/// has a stable numeric code.
#[derive(Debug, Error, PartialEq, Eq)]
pub enum FormatError {
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: String, found: String },

    #[error("truncated payload: expected {expected} bytes, found {found}")]
    Truncated { expected: u64, found: u64 },

    #[error("unsupported dtype tag {0:?}")]
    Dtype(String),

    #[error("unsupported layout tag {0:?}")]
    Layout(String),

    #[error("{0} trailing bytes after payload")]
    TrailingBytes(u64),

    #[error("invalid label value {value} at pixel {index}")]
    LabelValue { value: u8, index: usize },

    #[error("unsupported version {0}")]
    Version(u32),

    #[error("malformed record: {0}")]
    Malformed(String),
}

impl FormatError {
    pub fn code(&self) -> u32 {
        match self {
            FormatError::BadMagic { .. } => 1,
            FormatError::Truncated { .. } => 2,
            FormatError::Dtype(_) => 3,
            FormatError::Layout(_) => 4,
            FormatError::TrailingBytes(_) => 5,
            FormatError::LabelValue { .. } => 6,
            FormatError::Version(_) => 7,
            FormatError::Malformed(_) => 8,
        }
    }
}
