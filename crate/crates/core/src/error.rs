use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty score row")]
    EmptyScoreRow,

    #[error("singular system")]
    SingularSystem,

    #[error("empty cache")]
    EmptyCache,

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("invalid retain size: m = {m}, N = {n}")]
    InvalidRetain { m: usize, n: usize },

    #[error("budget exceeds zone: k = {k}, compress zone = {zone}")]
    BudgetExceedsZone { k: usize, zone: usize },

    #[error("not enough content vectors: requested {requested}, have {available}")]
    NotEnoughContent { requested: usize, available: usize },

    #[error("diverged: loss is not finite")]
    Diverged,

    #[error("budget too small: {0}")]
    BudgetTooSmall(String),

    #[error("index {index} out of range (len {len})")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error(transparent)]
    Kvd(#[from] KvdError),
}

/// Failures reading or writing a KVD cache file.
#[derive(Debug, Error)]
pub enum KvdError {
    #[error("bad magic: expected \"KVD1\"")]
    BadMagic,

    #[error("unsupported version {found} (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("truncated file: {0}")]
    Truncated(String),

    #[error("manifest/payload inconsistency: {0}")]
    OffsetInconsistency(String),

    #[error("missing tensor `{0}`")]
    MissingTensor(String),

    #[error("invalid manifest: {0}")]
    Manifest(String),

    #[error("manifest json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}
