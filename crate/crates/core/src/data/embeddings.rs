use std::path::Path;

use super::{check_magic, DataError};
use crate::codec::{write_atomic, ByteReader};

pub const EMBEDDING_MAGIC: &[u8; 4] = b"SSLE";
pub const EMBEDDING_VERSION: u32 = 1;

/// N feature vectors of length `dim` with one class label each.
///
/// Values are kept at f32 precision (the on-disk width) so that a store
/// compares equal to itself after a write/read round trip.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingStore {
    dim: usize,
    rows: Vec<f64>,
    labels: Vec<u32>,
}

impl EmbeddingStore {
    /// `rows` is row-major with `labels.len()` rows of `dim` values.
    pub fn new(dim: usize, rows: Vec<f64>, labels: Vec<u32>) -> Result<Self, DataError> {
        if dim == 0 || u32::try_from(dim).is_err() {
            return Err(DataError::Invalid(format!("embedding dim {dim} out of range")));
        }
        if rows.len() != dim * labels.len() {
            return Err(DataError::Invalid(format!(
                "{} values for {} rows of dim {dim}",
                rows.len(),
                labels.len()
            )));
        }
        if let Some(v) = rows.iter().find(|v| !v.is_finite() || !(v.abs() <= f32::MAX as f64)) {
            return Err(DataError::Invalid(format!("value {v} not representable as finite f32")));
        }
        let rows = rows.into_iter().map(|v| v as f32 as f64).collect();
        Ok(Self { dim, rows, labels })
    }

    pub fn from_rows(rows: &[Vec<f64>], labels: Vec<u32>) -> Result<Self, DataError> {
        let dim = rows.first().map_or(1, Vec::len);
        if rows.iter().any(|r| r.len() != dim) {
            return Err(DataError::Invalid("rows of unequal length".into()));
        }
        Self::new(dim, rows.concat(), labels)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.rows[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl ExactSizeIterator<Item = &[f64]> {
        self.rows.chunks(self.dim)
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }
}

pub fn encode_embeddings(store: &EmbeddingStore) -> Vec<u8> {
    let mut out = Vec::with_capacity(20 + store.rows.len() * 4 + store.labels.len() * 4);
    out.extend_from_slice(EMBEDDING_MAGIC);
    out.extend_from_slice(&EMBEDDING_VERSION.to_le_bytes());
    out.extend_from_slice(&(store.len() as u64).to_le_bytes());
    out.extend_from_slice(&(store.dim as u32).to_le_bytes());
    for &v in &store.rows {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    for &l in &store.labels {
        out.extend_from_slice(&l.to_le_bytes());
    }
    out
}

pub fn decode_embeddings(bytes: &[u8]) -> Result<EmbeddingStore, DataError> {
    let mut r = ByteReader::new(bytes);
    check_magic(r.take(4)?, EMBEDDING_MAGIC)?;
    let version = r.u32()?;
    if version != EMBEDDING_VERSION {
        return Err(DataError::UnsupportedVersion(version));
    }
    let n = r.u64()?;
    let dim = r.u32()? as u64;
    if dim == 0 {
        return Err(DataError::Invalid("embedding dim is zero".into()));
    }
    // values and labels both need room before anything is allocated
    let values = n.checked_mul(dim).ok_or_else(|| DataError::Invalid("N·dim overflows".into()))?;
    let per_row = dim.checked_add(1).expect("u32 + 1 fits in u64");
    r.ensure(n.checked_mul(per_row).unwrap_or(u64::MAX), 4)?;
    let raw = r.take(values as usize * 4)?;
    let rows = raw
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    let labels = r
        .take(n as usize * 4)?
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    if r.remaining() > 0 {
        return Err(DataError::TrailingBytes(r.remaining()));
    }
    EmbeddingStore::new(dim as usize, rows, labels)
}

pub fn write_embeddings(store: &EmbeddingStore, path: &Path) -> Result<(), DataError> {
    Ok(write_atomic(path, &encode_embeddings(store))?)
}

pub fn read_embeddings(path: &Path) -> Result<EmbeddingStore, DataError> {
    decode_embeddings(&std::fs::read(path)?)
}
