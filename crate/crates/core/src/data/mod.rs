//! On-disk datasets and embedding stores, plus a synthetic image generator.
//!
//! Both containers are little-endian binary files written atomically. See
//! `docs/FORMATS.md` for the byte layouts and the dataset manifest schema.

mod dataset;
mod embeddings;
mod split;
mod synth;

pub use dataset::{
    decode_dataset, encode_dataset, read_dataset, write_dataset, ClassInfo, Dataset, Sample, DATASET_MAGIC,
    DATASET_VERSION,
};
pub use embeddings::{
    decode_embeddings, encode_embeddings, read_embeddings, write_embeddings, EmbeddingStore, EMBEDDING_MAGIC,
    EMBEDDING_VERSION,
};
pub use split::{split_classes, Split};
pub use synth::{synth_dataset, synth_templates, SynthConfig};

use thiserror::Error;

use crate::codec::Truncated;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("bad magic {found:?}, expected {expected:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),
    #[error(transparent)]
    Truncated(#[from] Truncated),
    #[error("{0} trailing bytes after payload")]
    TrailingBytes(usize),
    #[error("invalid manifest: {0}")]
    Manifest(String),
    #[error("invalid data: {0}")]
    Invalid(String),
    #[error("invalid split: {0}")]
    Split(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn check_magic(found: &[u8], expected: &[u8; 4]) -> Result<(), DataError> {
    let found: [u8; 4] = found.try_into().expect("4 bytes");
    if &found != expected {
        return Err(DataError::BadMagic {
            expected: *expected,
            found,
        });
    }
    Ok(())
}
