use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("empty template")]
    EmptyTemplate,
    #[error("no gaussians")]
    NoGaussians,
    #[error("no geometry evidence")]
    NoGeometryEvidence,
    #[error("no foreground")]
    NoForeground,
    #[error("invalid camera: {0}")]
    InvalidCamera(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("corrupt depth blob {path}: {reason}")]
    CorruptDepth { path: PathBuf, reason: String },
    #[error("corrupt file {path}: {reason}")]
    Corrupt { path: PathBuf, reason: String },
    #[error("unsupported format_version {found} in {path} (expected {expected})")]
    Version { path: PathBuf, found: u32, expected: u32 },
    #[error("i/o error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("training diverged at iteration {iteration}: loss is {loss}")]
    Diverged { iteration: usize, loss: f32 },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("config: {0}")]
    Config(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn corrupt(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Corrupt { path: path.into(), reason: reason.into() }
    }
}

impl Error {
    /// Process exit code: 1 usage or configuration, 2 runtime, 3 I/O.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io { .. } | Error::Corrupt { .. } | Error::CorruptDepth { .. } | Error::Version { .. } => 3,
            Error::Config(_) | Error::InvalidInput(_) => 1,
            _ => 2,
        }
    }
}
