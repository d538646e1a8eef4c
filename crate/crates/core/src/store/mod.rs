//! Embedding files, dataset manifests and session plans.

mod format;
mod plan;

pub use format::{
    load_embeddings, sidecar_path, write_embeddings, write_sidecar, DatasetManifest, LabeledEmbedding, Split,
    FORMAT_VERSION, HEADER_LEN, MAGIC,
};
pub use plan::{
    build_session_plan, build_session_plan_with, default_session_count, sample_session_data, session_sizes,
    session_test_data, SessionMode, SessionPlan,
};

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic bytes {0:?}, expected \"BAMP\"")]
    BadMagic([u8; 4]),
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u16),
    #[error("file is truncated")]
    Truncated,
    #[error("record {index} has a non-finite entry")]
    NonFinite { index: u64 },
    #[error("record {index} has invalid split byte {value}")]
    BadSplit { index: u64, value: u8 },
    #[error("mixed dimensions: expected {expected}, found {found}")]
    MixedDimensions { expected: usize, found: usize },
    #[error("{classes} classes cannot form {sessions} sessions")]
    TooFewClasses { classes: usize, sessions: usize },
    #[error("session {session} out of range ({sessions} sessions)")]
    NoSuchSession { session: usize, sessions: usize },
    #[error("class {class_id} has {available} training records, {shots} shots requested")]
    NotEnoughShots { class_id: u32, available: usize, shots: usize },
    #[error("invalid dataset: {0}")]
    Invalid(String),
}
