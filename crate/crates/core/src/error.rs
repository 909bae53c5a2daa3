use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{0}")]
    Input(String),

    #[error("graph build: {0}")]
    Build(String),

    #[error("{msg} (byte {pos})")]
    Format { msg: String, pos: u64 },

    #[error("preprocessing: {0}")]
    Preprocess(String),

    #[error("training: {0}")]
    Training(String),

    #[error("attribution: {0}")]
    Attribution(String),

    #[error("render: {0}")]
    Render(String),

    #[error("internal: {0}")]
    Internal(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Coarse failure class, stable across releases. Used for CLI exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCategory {
    Input,
    Format,
    Numeric,
    Internal,
}

impl ErrorCategory {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorCategory::Input => 1,
            ErrorCategory::Format => 2,
            ErrorCategory::Numeric => 3,
            ErrorCategory::Internal => 4,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ErrorCategory::Input => "input",
            ErrorCategory::Format => "format",
            ErrorCategory::Numeric => "numeric",
            ErrorCategory::Internal => "internal",
        }
    }
}

impl Error {
    pub fn category(&self) -> ErrorCategory {
        match self {
            Error::Input(_) | Error::Build(_) | Error::Preprocess(_) | Error::Render(_) | Error::Io(_) => {
                ErrorCategory::Input
            }
            Error::Format { .. } => ErrorCategory::Format,
            Error::Training(_) | Error::Attribution(_) => ErrorCategory::Numeric,
            Error::Internal(_) => ErrorCategory::Internal,
        }
    }

    pub(crate) fn format(msg: impl Into<String>, pos: u64) -> Self {
        Error::Format { msg: msg.into(), pos }
    }
}

macro_rules! input_err {
    ($($arg:tt)*) => { $crate::error::Error::Input(format!($($arg)*)) };
}
pub(crate) use input_err;
