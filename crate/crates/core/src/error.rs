use std::path::PathBuf;

use thiserror::Error;

/// Errors surfaced by every module of the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("bad magic")]
    BadMagic,
    #[error("truncated payload")]
    TruncatedPayload,
    #[error("dims overflow")]
    DimsOverflow,
    #[error("unsupported dtype code {0}")]
    UnsupportedDtype(u32),
    #[error("unsupported tensor rank {0} (max 4)")]
    UnsupportedRank(usize),
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),
    #[error("malformed archive: {0}")]
    MalformedArchive(String),
    #[error("missing parameter `{0}`")]
    MissingParameter(String),
    #[error("duplicate entry `{0}`")]
    DuplicateEntry(String),
    #[error("config digest mismatch: checkpoint {found}, run config {expected}")]
    DigestMismatch { expected: String, found: String },
    #[error("invalid dataset: {0}")]
    InvalidDataset(String),
    #[error("invalid spec: {0}")]
    InvalidSpec(String),
    #[error("missing signature for class {0}")]
    MissingSignature(usize),
    #[error("budget requested for class {0}, which is absent from the target domain")]
    AbsentClass(usize),
    #[error("image smaller than one patch ({height}x{width} < {patch})")]
    ImageTooSmall {
        height: usize,
        width: usize,
        patch: usize,
    },
    #[error("source too short for masking ratio (sequence {len_concat} < target {n_target})")]
    SourceTooShort { len_concat: usize, n_target: usize },
    #[error("geometry mismatch: recovery window sized for {expected} tokens, got {found}")]
    GeometryMismatch { expected: usize, found: usize },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("unregistered domain `{0}`")]
    UnregisteredDomain(String),
    #[error("empty supervision: no labeled pixels")]
    EmptySupervision,
    #[error("class count {0} too small (need at least 2)")]
    TooFewClasses(usize),
    #[error("divergence at step {step}: non-finite {term} loss")]
    Divergence { step: usize, term: String },
    #[error("non-finite {0} loss")]
    NonFinite(String),
    #[error("inconsistent class sets across reports")]
    InconsistentClasses,
    #[error("vanishing likelihood at the probe point")]
    VanishingLikelihood,
    #[error("quadrature grid too narrow: tail mass {0:e} outside bounds")]
    GridTooNarrow(f64),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("config error: {0}")]
    Config(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
