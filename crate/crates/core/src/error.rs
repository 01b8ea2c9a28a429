use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    /// Operand shapes are incompatible for the named operation.
    #[error("{op}: dimension mismatch between {lhs:?} and {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// A value lies outside the mathematical domain of the operation.
    #[error("{op}: domain error: {detail}")]
    Domain { op: &'static str, detail: String },

    /// A caller-side precondition was violated.
    #[error("{op}: contract violated: {detail}")]
    Contract { op: &'static str, detail: String },

    #[error("value out of range: {0}")]
    OutOfRange(String),

    #[error("parse error{}: {detail}", fmt_location(.key, .line))]
    Parse {
        key: Option<String>,
        line: Option<usize>,
        detail: String,
    },

    #[error("scene contains no points inside the crop ranges")]
    EmptyScene,

    #[error("scene generation failed: {0}")]
    Generation(String),

    #[error("{path}: {detail}")]
    Io { path: String, detail: String },
}

fn fmt_location(key: &Option<String>, line: &Option<usize>) -> String {
    match (key, line) {
        (Some(k), Some(l)) => format!(" at line {l} (key {k})"),
        (Some(k), None) => format!(" (key {k})"),
        (None, Some(l)) => format!(" at line {l}"),
        (None, None) => String::new(),
    }
}

impl Error {
    pub(crate) fn dim(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Dimension {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn domain(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Domain {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn contract(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Contract {
            op,
            detail: detail.into(),
        }
    }
}
