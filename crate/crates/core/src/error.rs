use thiserror::Error;

/// Errors produced anywhere in the library.
///
/// The CLI maps these onto process exit codes through [`SvitError::exit_code`].
#[derive(Debug, Error)]
pub enum SvitError {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("invalid axis {axis} for tensor of rank {rank}")]
    Axis { axis: usize, rank: usize },
    #[error("label {label} out of range for {classes} classes")]
    Label { label: usize, classes: usize },
    #[error("contract violated: {0}")]
    Contract(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
}

impl SvitError {
    pub fn contract(msg: impl Into<String>) -> Self {
        SvitError::Contract(msg.into())
    }

    pub fn format(msg: impl Into<String>) -> Self {
        SvitError::Format(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        SvitError::Config(msg.into())
    }

    /// 2 config error, 3 data error, 4 numeric failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            SvitError::Config(_) => 2,
            SvitError::Numeric(_) => 4,
            _ => 3,
        }
    }
}

pub type Result<T, E = SvitError> = std::result::Result<T, E>;
