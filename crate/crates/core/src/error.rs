use std::path::PathBuf;

/// Errors raised anywhere in the pipeline.
///
/// Variants are grouped by the CLI exit status they map to: usage
/// problems (1), bad input data (2) and numerical failures (3).
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("{op}: shape mismatch {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },

    #[error("matrix is singular or ill-conditioned (pivot {pivot:.3e}, condition estimate {condition:.3e})")]
    Singular { pivot: f64, condition: f64 },

    #[error("non-finite value produced in {0}")]
    NonFinite(String),

    #[error("hadamard size {0} is not a power of two")]
    NotPowerOfTwo(usize),

    #[error("calibration of layer {layer} diverged at step {step} (loss {loss})")]
    Diverged { layer: String, step: usize, loss: f64 },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: malformed JSON: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("{path}: unsupported format version {found:?} (supported major {supported})")]
    UnsupportedVersion {
        path: PathBuf,
        found: String,
        supported: u32,
    },

    #[error("tensor {tensor}: blob {path} is missing")]
    MissingBlob { tensor: String, path: PathBuf },

    #[error("tensor {tensor} ({path}): expected {expected} bytes, found {actual}")]
    BlobSize {
        tensor: String,
        path: PathBuf,
        expected: u64,
        actual: u64,
    },

    #[error("tensor {tensor}: non-finite value at element {index} (byte offset {offset})")]
    NonFiniteValue {
        tensor: String,
        index: usize,
        offset: usize,
    },

    #[error("invalid data: {0}")]
    Data(String),
}

impl Error {
    /// Process exit status for this error.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidArgument(_) => 1,
            Error::Io { .. }
            | Error::Json { .. }
            | Error::UnsupportedVersion { .. }
            | Error::MissingBlob { .. }
            | Error::BlobSize { .. }
            | Error::NonFiniteValue { .. }
            | Error::Data(_)
            | Error::Shape { .. } => 2,
            Error::Singular { .. }
            | Error::NonFinite(_)
            | Error::NotPowerOfTwo(_)
            | Error::Diverged { .. } => 3,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
