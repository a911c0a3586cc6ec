//! Weight containers and run manifests.

mod container;
mod manifest;

use thiserror::Error;

pub use container::{
    decode_container, encode_container, read_container, write_container, IndexEntry, StoredTensor, MAGIC, VERSION,
};
pub use manifest::{append_record, parse_manifest, read_manifest, resolve_weights_path, write_manifest, RunRecord};

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic: not a GPRB container")]
    BadMagic,
    #[error("unsupported container version {0}")]
    UnsupportedVersion(u32),
    #[error("corrupt index: {0}")]
    CorruptIndex(String),
    #[error("truncated payload: {0}")]
    TruncatedPayload(String),
    #[error("duplicate tensor name {0:?}")]
    DuplicateName(String),
    #[error("tensor {0:?} contains NaN or infinite values")]
    NonFinite(String),
    #[error("manifest line {line}: {message}")]
    ParseError { line: usize, message: String },
    #[error("manifest line {line}: duplicate record for model {model_id:?} epoch {epoch}")]
    DuplicateKey { line: usize, model_id: String, epoch: u32 },
    #[error("manifest mixes fractional (<= 1) and percentage (> 1) accuracies")]
    ScaleMixing,
}

impl StoreError {
    /// Stable error name used in CLI diagnostics.
    pub fn kind(&self) -> &'static str {
        match self {
            StoreError::Io(_) => "IoError",
            StoreError::BadMagic => "BadMagic",
            StoreError::UnsupportedVersion(_) => "UnsupportedVersion",
            StoreError::CorruptIndex(_) => "CorruptIndex",
            StoreError::TruncatedPayload(_) => "TruncatedPayload",
            StoreError::DuplicateName(_) => "DuplicateName",
            StoreError::NonFinite(_) => "NonFinite",
            StoreError::ParseError { .. } => "ParseError",
            StoreError::DuplicateKey { .. } => "DuplicateKey",
            StoreError::ScaleMixing => "ScaleMixing",
        }
    }
}
