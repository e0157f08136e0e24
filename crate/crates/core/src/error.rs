use std::path::PathBuf;

/// Errors produced by the morphing engine.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {what}: expected {expected}, found {found}")]
    Shape {
        what: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("empty point set")]
    EmptyPointSet,

    #[error("degenerate structure")]
    DegenerateStructure,

    #[error("frame {frame}: {source}")]
    Frame {
        frame: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("orientation undefined")]
    OrientationUndefined,

    #[error("nothing morphs: both stages have a frozen alpha")]
    NothingMorphs,

    #[error("missing frame cache: {0}")]
    MissingCache(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("malformed {kind} data: {reason}")]
    Format { kind: &'static str, reason: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn format(kind: &'static str, reason: impl Into<String>) -> Self {
        Error::Format {
            kind,
            reason: reason.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Attaches a frame index, unless one is already attached.
    pub fn at_frame(self, frame: usize) -> Self {
        match self {
            e @ Error::Frame { .. } => e,
            e => Error::Frame {
                frame,
                source: Box::new(e),
            },
        }
    }

    /// The innermost error, with any frame context removed.
    pub fn root(&self) -> &Error {
        match self {
            Error::Frame { source, .. } => source.root(),
            e => e,
        }
    }
}
