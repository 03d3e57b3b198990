use std::fmt;

/// Errors produced anywhere in the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("domain error in {op}: {detail}")]
    Domain { op: &'static str, detail: String },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("unknown config key `{key}`; valid keys: {}", .valid.join(", "))]
    UnknownKey { key: String, valid: Vec<String> },

    #[error("format error at byte offset {offset}: {detail}")]
    Format { offset: u64, detail: String },

    #[error("data error: {0}")]
    Data(String),

    #[error("non-finite value: {0}")]
    NonFinite(NonFinite),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Diagnostics attached to a numeric abort.
#[derive(Debug, Clone, PartialEq)]
pub struct NonFinite {
    pub what: String,
    pub step: Option<u64>,
    pub batch_indices: Vec<usize>,
}

impl fmt::Display for NonFinite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.what)?;
        if let Some(step) = self.step {
            write!(f, " at step {step}")?;
        }
        if !self.batch_indices.is_empty() {
            write!(f, " (batch indices {:?})", self.batch_indices)?;
        }
        Ok(())
    }
}

impl Error {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn non_finite(what: impl Into<String>) -> Self {
        Error::NonFinite(NonFinite {
            what: what.into(),
            step: None,
            batch_indices: Vec::new(),
        })
    }
}

pub type Result<T> = std::result::Result<T, Error>;
