use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("shape mismatch at layer {layer}: {detail}")]
    Layer { layer: usize, detail: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("wrong magic in IDX file {path}: expected {expected:#010x}, found {found:#010x}")]
    IdxMagic {
        path: String,
        expected: u32,
        found: u32,
    },

    #[error("truncated IDX file {path}: needed {needed} bytes, found {found}")]
    IdxTruncated {
        path: String,
        needed: usize,
        found: usize,
    },

    #[error("IDX image/label count mismatch: {images} images vs {labels} labels")]
    IdxCountMismatch { images: usize, labels: usize },

    #[error("checkpoint version mismatch: expected {expected:?}, found {found:?}")]
    CheckpointVersion { expected: String, found: String },

    #[error("checkpoint parameter {name}: stored shape {found:?} disagrees with config-derived shape {expected:?}")]
    CheckpointShape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("corrupt checkpoint: {0}")]
    CheckpointCorrupt(String),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}
