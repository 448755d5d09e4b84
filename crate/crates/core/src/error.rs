use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("target {target} out of range for {classes} classes")]
    TargetOutOfRange { target: usize, classes: usize },
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("prefix shape mismatch: {0}")]
    PrefixShapeMismatch(String),
    #[error("token {token} out of range for vocabulary of {vocab}")]
    TokenOutOfRange { token: u32, vocab: usize },
    #[error("sequence of length {len} exceeds max_len {max_len}")]
    SequenceTooLong { len: usize, max_len: usize },
    #[error("parameter parity violated: adapter={adapter} prefix={prefix} lora={lora}")]
    ParityViolation {
        adapter: usize,
        prefix: usize,
        lora: usize,
    },
    #[error("loss diverged at step {step}")]
    DivergedLoss { step: usize },
    #[error("interpolation ratios out of range: alpha={alpha} beta={beta}")]
    RatioOutOfRange { alpha: f64, beta: f64 },
    #[error("length {0} is not a power of two")]
    NotPowerOfTwo(usize),
    #[error("missing PET solution for task {task} kind {kind}")]
    MissingSolution { task: String, kind: String },
    #[error("subspace mismatch: {0}")]
    SubspaceMismatch(String),
    #[error("baseline metric is zero")]
    ZeroBaseline,
    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),
    #[error("infeasible task spec: {0}")]
    InfeasibleSpec(String),
    #[error("split {0} is empty")]
    EmptySplit(String),
    #[error("missing artifact {}", .0.display())]
    MissingArtifact(PathBuf),
    #[error("invalid config: {0}")]
    ConfigInvalid(String),
    #[error("corrupt checkpoint {}: {reason}", path.display())]
    CorruptCheckpoint { path: PathBuf, reason: String },
    #[error("artifact directory {} is locked by another run", .0.display())]
    Locked(PathBuf),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            op,
            detail: detail.into(),
        }
    }

    /// Stable machine-readable category, used as the CLI error tag.
    pub fn category(&self) -> &'static str {
        match self {
            Error::ShapeMismatch { .. } => "ShapeMismatch",
            Error::NonFinite { .. } => "NonFinite",
            Error::TargetOutOfRange { .. } => "TargetOutOfRange",
            Error::NonScalarLoss { .. } => "NonScalarLoss",
            Error::PrefixShapeMismatch(_) => "PrefixShapeMismatch",
            Error::TokenOutOfRange { .. } => "TokenOutOfRange",
            Error::SequenceTooLong { .. } => "SequenceTooLong",
            Error::ParityViolation { .. } => "ParityViolation",
            Error::DivergedLoss { .. } => "DivergedLoss",
            Error::RatioOutOfRange { .. } => "RatioOutOfRange",
            Error::NotPowerOfTwo(_) => "NotPowerOfTwo",
            Error::MissingSolution { .. } => "MissingSolution",
            Error::SubspaceMismatch(_) => "SubspaceMismatch",
            Error::ZeroBaseline => "ZeroBaseline",
            Error::DegenerateGeometry(_) => "DegenerateGeometry",
            Error::InfeasibleSpec(_) => "InfeasibleSpec",
            Error::EmptySplit(_) => "EmptySplit",
            Error::MissingArtifact(_) => "MissingArtifact",
            Error::ConfigInvalid(_) => "ConfigInvalid",
            Error::CorruptCheckpoint { .. } => "CorruptCheckpoint",
            Error::Locked(_) => "Locked",
            Error::Io(_) => "Io",
            Error::Json(_) => "Json",
            Error::Csv(_) => "Csv",
        }
    }

    /// Process exit code for the CLI. Zero is reserved for success.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::ConfigInvalid(_) => 2,
            Error::MissingArtifact(_) | Error::MissingSolution { .. } => 3,
            Error::CorruptCheckpoint { .. } => 4,
            Error::DivergedLoss { .. } | Error::NonFinite { .. } => 5,
            Error::Locked(_) => 6,
            Error::Io(_) | Error::Json(_) | Error::Csv(_) => 7,
            _ => 1,
        }
    }

    /// Errors raised by the tensor layer during training mean the loss blew up.
    pub(crate) fn into_diverged(self, step: usize) -> Self {
        match self {
            Error::NonFinite { .. } => Error::DivergedLoss { step },
            other => other,
        }
    }
}
