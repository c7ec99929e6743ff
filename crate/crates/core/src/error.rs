//! Crate-wide error type. Variants are grouped so the CLI can map them onto
//! its exit-code classes (I/O, config/contract, numerical).

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image format error on {path}: {message}")]
    ImageFormat { path: PathBuf, message: String },

    #[error("invalid image: {0}")]
    InvalidImage(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("manifest: missing slice file {0}")]
    MissingSlice(PathBuf),

    #[error("manifest: duplicate subject id {0:?}")]
    DuplicateSubject(String),

    #[error("manifest: grade {grade} out of range 0-3 for subject {subject:?}")]
    GradeOutOfRange { subject: String, grade: i64 },

    #[error("manifest: slice dimension mismatch for subject {subject:?}: {a}x{b} vs {c}x{d}")]
    DimensionMismatch {
        subject: String,
        a: usize,
        b: usize,
        c: usize,
        d: usize,
    },

    #[error("manifest: malformed record at line {line}: {message}")]
    ManifestFormat { line: usize, message: String },

    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("model container: bad magic bytes (expected \"FZKM\")")]
    BadMagic,

    #[error("model container: unsupported version {0}")]
    BadVersion(u32),

    #[error("model container: {0}")]
    Container(String),

    #[error("numerical failure: {0}")]
    Numerical(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Exit-code class used by the CLI: 3 = i/o, 4 = config or contract,
    /// 5 = numerical failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io { .. } | Error::ImageFormat { .. } | Error::MissingSlice(_) => 3,
            Error::Numerical(_) => 5,
            _ => 4,
        }
    }
}
