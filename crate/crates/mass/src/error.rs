use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    #[error("dimension mismatch: {context} (expected {expected}, got {got})")]
    DimensionMismatch {
        context: String,
        expected: String,
        got: String,
    },

    #[error("rank-deficient input: smallest/largest singular value ratio {ratio:.3e} below cutoff {cutoff:.1e}")]
    RankDeficient { ratio: f64, cutoff: f64 },

    #[error("invalid rank {k}: must be in 1..={max}")]
    InvalidRank { k: usize, max: usize },

    #[error("zero-norm vector in {context}")]
    ZeroNorm { context: String },

    #[error("empty input: {context}")]
    EmptyInput { context: String },

    #[error("topology mismatch: {0}")]
    Topology(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("unknown layer {0:?}")]
    UnknownLayer(String),

    #[error("unknown method {0:?}")]
    UnknownMethod(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("bad magic bytes: expected \"MTSV\", got {0:?}")]
    BadMagic([u8; 4]),

    #[error("unsupported container version {0} (supported: 1)")]
    UnsupportedVersion(u32),

    #[error("truncated payload: {context}")]
    TruncatedPayload { context: String },

    #[error("shape/offset inconsistency: {0}")]
    ShapeInconsistency(String),

    #[error("NaN in payload of tensor {0:?}")]
    NanPayload(String),

    #[error("malformed header: {0}")]
    BadHeader(String),
}
