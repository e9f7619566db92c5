use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid shape: {0}")]
    Shape(String),

    #[error("dimension mismatch: {what}: expected {expected:?}, got {actual:?}")]
    DimMismatch {
        what: &'static str,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("non-finite logit at flat index {index} (class {class}, pixel {pixel})")]
    NonFiniteLogit {
        index: usize,
        class: usize,
        pixel: usize,
    },

    #[error("rect {rect:?} does not fit in a {height}x{width} raster")]
    RectOutOfBounds {
        rect: crate::tensor::Rect,
        height: usize,
        width: usize,
    },

    #[error("label {label} at pixel {pixel} is outside 0..{classes}")]
    LabelOutOfRange {
        label: u8,
        pixel: usize,
        classes: usize,
    },

    #[error("entropy needs at least two classes, got {0}")]
    TooFewClasses(usize),

    #[error("target set is empty")]
    EmptyTargetSet,

    #[error("no probability volume available for boundary image {0}")]
    MissingProbVolume(u32),

    #[error("no class has a defined IoU")]
    NoDefinedClasses,

    #[error("bad magic {0:?}")]
    BadMagic([u8; 4]),

    #[error("unsupported format version {0}")]
    UnsupportedVersion(u16),

    #[error("unknown dtype tag {0}")]
    UnknownDtype(u8),

    #[error("truncated payload: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },

    #[error("declared dims {0:?} overflow the addressable size")]
    DimsOverflow(Vec<u64>),

    #[error("dtype mismatch: expected {expected}, got {actual}")]
    DtypeMismatch {
        expected: &'static str,
        actual: &'static str,
    },

    #[error("non-finite gradient in parameter block `{0}`")]
    NonFiniteGradient(&'static str),

    #[error("activation cache does not belong to these parameters: {0}")]
    StaleCache(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("training diverged at step {step}: loss = {loss}")]
    Diverged { step: u64, loss: f64 },

    #[error("round {round}: selection is empty")]
    EmptySelection { round: usize },

    #[error("refusing to read labels for {0}: target labels are evaluation-only")]
    LabelLeak(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
