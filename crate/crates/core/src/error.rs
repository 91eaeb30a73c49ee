use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("autograd: {0}")]
    Autograd(String),

    #[error("no masked positions in input string")]
    NothingMasked,

    #[error("position {0} is not masked")]
    NotMasked(usize),

    #[error("enumeration budget exceeded: {needed} leaves requested, bound is {bound}")]
    BudgetExceeded { needed: f64, bound: usize },

    #[error("sampler was trained against base {expected}, but decoding base is {found}")]
    BaseMismatch { expected: String, found: String },

    #[error("trace replay mismatch at event {event}: {detail}")]
    ReplayMismatch { event: usize, detail: String },

    #[error("training diverged at step {step}: {detail}")]
    Diverged { step: usize, detail: String },

    #[error("checkpoint: bad magic bytes")]
    CheckpointMagic,

    #[error("checkpoint: unsupported format version {found} (expected {expected})")]
    CheckpointVersion { found: u32, expected: u32 },

    #[error("checkpoint: truncated ({0})")]
    CheckpointTruncated(String),

    #[error("checkpoint: checksum mismatch")]
    CheckpointChecksum,

    #[error("checkpoint: {0}")]
    CheckpointFormat(String),

    #[error("config: {0}")]
    Config(String),

    #[error("missing artifact {path}; run stage `{stage}` first")]
    MissingArtifact { path: PathBuf, stage: &'static str },

    #[error("record format: {0}")]
    Format(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Stable machine-readable category, used by the CLI on stderr and for exit codes.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Shape(_) | Error::NonFinite(_) | Error::Autograd(_) | Error::Diverged { .. } => {
                "numeric"
            }
            Error::InvalidArgument(_) | Error::NothingMasked | Error::NotMasked(_) => "input",
            Error::BudgetExceeded { .. } => "budget",
            Error::BaseMismatch { .. } => "base_mismatch",
            Error::ReplayMismatch { .. } => "replay",
            Error::CheckpointMagic
            | Error::CheckpointVersion { .. }
            | Error::CheckpointTruncated(_)
            | Error::CheckpointChecksum
            | Error::CheckpointFormat(_) => "checkpoint",
            Error::Config(_) => "config",
            Error::MissingArtifact { .. } => "missing_artifact",
            Error::Format(_) => "format",
            Error::Io { .. } => "io",
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self.category() {
            "input" => 2,
            "config" => 3,
            "missing_artifact" => 4,
            "checkpoint" => 5,
            "base_mismatch" => 6,
            "io" => 7,
            "budget" => 8,
            "replay" => 9,
            "format" => 10,
            _ => 1,
        }
    }
}
