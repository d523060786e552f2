use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: input of extent {extent} (padded {padded}) is shorter than kernel {kernel}")]
    EmptyOutput {
        op: &'static str,
        extent: usize,
        padded: usize,
        kernel: usize,
    },

    #[error("NaN encountered in {0}")]
    NaN(&'static str),

    #[error("numeric instability: {0}")]
    Numeric(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("layout error: {0}")]
    Layout(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("gradient oracle failure: {0}")]
    Oracle(String),

    #[error("non-finite gradient for parameter `{name}` ({count} entries)")]
    NonFiniteGradient { name: String, count: usize },

    #[error("non-finite loss at epoch {epoch}, step {step}")]
    NonFiniteLoss { epoch: usize, step: usize },

    #[error("tensor file format: {0}")]
    Format(String),

    #[error("manifest line {line}: {msg}")]
    Manifest { line: usize, msg: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
