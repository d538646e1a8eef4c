//! Few-shot class-incremental learning over pre-extracted embeddings with
//! mixture-of-vMF prototype training, statistical-analogy calibration,
//! Mahalanobis scoring and soft voting.

pub mod adaptation;
pub mod hypersphere;
pub mod store;
pub mod analogy;
pub mod ensemble;
pub mod protocol;
pub mod config;
pub mod report;
pub mod synth;
