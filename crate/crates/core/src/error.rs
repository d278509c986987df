use std::fmt;

use thiserror::Error;

/// Coarse error families. The CLI maps each one to a fixed exit code and the
/// C ABI to a fixed status code, so the numbering here is part of the
/// external contract.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ErrorCategory {
    Config,
    Data,
    Numeric,
    Unsupported,
    Io,
}

impl ErrorCategory {
    pub fn as_str(self) -> &'static str {
        match self {
            ErrorCategory::Config => "config",
            ErrorCategory::Data => "data",
            ErrorCategory::Numeric => "numeric",
            ErrorCategory::Unsupported => "unsupported",
            ErrorCategory::Io => "io",
        }
    }

    pub fn exit_code(self) -> i32 {
        match self {
            ErrorCategory::Config => 2,
            ErrorCategory::Data => 3,
            ErrorCategory::Numeric => 4,
            ErrorCategory::Unsupported => 5,
            ErrorCategory::Io => 6,
        }
    }
}

impl fmt::Display for ErrorCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Error)]
pub enum LmError {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Dimension {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("contract violated: {0}")]
    Contract(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("{source_name}:{line}: {message}")]
    Parse {
        source_name: String,
        line: usize,
        message: String,
    },
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("run diverged at step {step}: {message}")]
    Diverged { step: usize, message: String },
    #[error("conditional distribution undefined for context {context:?} (no observations and k = 0)")]
    UndefinedContext { context: Vec<usize> },
    #[error("unsupported: {0}")]
    Unsupported(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl LmError {
    pub fn category(&self) -> ErrorCategory {
        match self {
            LmError::Dimension { .. } | LmError::Contract(_) | LmError::Config(_) => {
                ErrorCategory::Config
            }
            LmError::Data(_) | LmError::Parse { .. } => ErrorCategory::Data,
            LmError::Numeric(_) | LmError::Diverged { .. } | LmError::UndefinedContext { .. } => {
                ErrorCategory::Numeric
            }
            LmError::Unsupported(_) => ErrorCategory::Unsupported,
            LmError::Io(_) => ErrorCategory::Io,
        }
    }

    pub(crate) fn dim(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        LmError::Dimension {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }
}

pub type Result<T> = std::result::Result<T, LmError>;
