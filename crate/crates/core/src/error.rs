use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{layer}: shape mismatch, expected {expected}, got {got}")]
    Shape {
        layer: String,
        expected: String,
        got: String,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {msg}")]
    Data { path: PathBuf, msg: String },

    #[error("weights: bad magic {0:?}, not an LWAW container")]
    BadMagic(Vec<u8>),

    #[error("weights: unsupported container version {0}")]
    UnsupportedVersion(u32),

    #[error("weights: truncated file ({0})")]
    Truncated(String),

    #[error("weights: malformed manifest: {0}")]
    Manifest(String),

    #[error("weights: missing tensor `{0}`")]
    MissingKey(String),

    #[error("weights: unexpected tensor `{0}`")]
    UnexpectedKey(String),

    #[error("weights: tensor `{name}` has shape {got:?}, model expects {expected:?}")]
    TensorShape {
        name: String,
        expected: [usize; 4],
        got: [usize; 4],
    },

    #[error("non-finite loss at step {step} (lr {lr:e})")]
    NonFiniteLoss { step: u64, lr: f64 },
}

impl Error {
    pub(crate) fn shape(layer: impl Into<String>, expected: impl std::fmt::Debug, got: impl std::fmt::Debug) -> Self {
        Error::Shape {
            layer: layer.into(),
            expected: format!("{expected:?}"),
            got: format!("{got:?}"),
        }
    }

    /// Prefix the diagnostic with the layer it came from.
    pub fn in_layer(self, layer: &str) -> Self {
        match self {
            Error::Shape {
                layer: l,
                expected,
                got,
            } => Error::Shape {
                layer: format!("{layer}: {l}"),
                expected,
                got,
            },
            Error::InvalidArgument(m) => Error::InvalidArgument(format!("{layer}: {m}")),
            other => other,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
