//! `SVTC` checkpoint files.
//!
//! ```text
//! "SVTC"            4-byte magic
//! u32               format version (1)
//! u32 + bytes       length-prefixed UTF-8 JSON header {"vit": ViTConfig, "retrieval_dim": null | C}
//! tensor*           every weight of ViTConfig::manifest, in order
//! tensor, tensor    retrieval.weight [dim, C], retrieval.bias [C] when retrieval_dim is set
//! ```
//!
//! Tensors use the tensor wire format (u32 rank, u64 dims, f64 data), all
//! little-endian. Trailing bytes are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{ViTConfig, ViTParams, VitWeights};
use crate::codec::{write_atomic, ByteReader, Truncated};
use crate::tensor::{encode_tensor, Tensor, TensorError};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SVTC";
pub const CHECKPOINT_VERSION: u32 = 1;
const MAX_HEADER: u32 = 1 << 20;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint: bad magic {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),
    #[error(transparent)]
    Truncated(#[from] Truncated),
    #[error("invalid checkpoint header: {0}")]
    Header(String),
    #[error("tensor {name}: {source}")]
    Tensor { name: String, source: TensorError },
    #[error("tensor {name}: expected shape {expected:?}, found {found:?}")]
    Shape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("{0} trailing bytes after checkpoint")]
    TrailingBytes(usize),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Linear map from backbone embedding to a retrieval embedding of size C.
#[derive(Clone, Debug, PartialEq)]
pub struct Projection {
    /// `[dim, C]`
    pub weight: Tensor,
    /// `[C]`
    pub bias: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: ViTParams,
    pub projection: Option<Projection>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    vit: ViTConfig,
    retrieval_dim: Option<usize>,
}

pub fn encode_checkpoint(ckpt: &Checkpoint) -> Vec<u8> {
    let header = Header {
        vit: ckpt.params.config.clone(),
        retrieval_dim: ckpt.projection.as_ref().map(|p| p.bias.numel()),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(12 + json.len() + 8 * ckpt.params.num_params());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for t in ckpt.params.weights.iter() {
        encode_tensor(t, &mut out);
    }
    if let Some(p) = &ckpt.projection {
        encode_tensor(&p.weight, &mut out);
        encode_tensor(&p.bias, &mut out);
    }
    out
}

fn expect_tensor(r: &mut ByteReader<'_>, name: &str, shape: &[usize]) -> Result<Tensor, CheckpointError> {
    let t = crate::tensor::serialize_read(r).map_err(|source| CheckpointError::Tensor {
        name: name.to_string(),
        source,
    })?;
    if t.shape() != shape {
        return Err(CheckpointError::Shape {
            name: name.to_string(),
            expected: shape.to_vec(),
            found: t.shape().to_vec(),
        });
    }
    Ok(t)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint, CheckpointError> {
    let mut r = ByteReader::new(bytes);
    let magic: [u8; 4] = r.take(4)?.try_into().expect("4 bytes");
    if &magic != CHECKPOINT_MAGIC {
        return Err(CheckpointError::BadMagic(magic));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(CheckpointError::UnsupportedVersion(version));
    }
    let len = r.u32()?;
    if len > MAX_HEADER {
        return Err(CheckpointError::Header(format!("header length {len} exceeds limit")));
    }
    let json = r.take(len as usize)?;
    let header: Header = serde_json::from_slice(json).map_err(|e| CheckpointError::Header(e.to_string()))?;
    let cfg = header.vit;
    cfg.validate().map_err(|e| CheckpointError::Header(e.to_string()))?;
    // every parameter needs at least 8 bytes; refuse before building the manifest
    r.ensure(cfg.param_count() as u64, 8)?;
    let mut tensors = Vec::new();
    for (name, shape) in cfg.manifest() {
        tensors.push(expect_tensor(&mut r, &name, &shape)?);
    }
    let weights = VitWeights::from_entries(cfg.depth, tensors).expect("manifest layout");
    let projection = match header.retrieval_dim {
        None => None,
        Some(0) => return Err(CheckpointError::Header("retrieval_dim must be positive".into())),
        Some(c) => Some(Projection {
            weight: expect_tensor(&mut r, "retrieval.weight", &[cfg.dim, c])?,
            bias: expect_tensor(&mut r, "retrieval.bias", &[c])?,
        }),
    };
    if r.remaining() > 0 {
        return Err(CheckpointError::TrailingBytes(r.remaining()));
    }
    Ok(Checkpoint {
        params: ViTParams { config: cfg, weights },
        projection,
    })
}

pub fn write_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<(), CheckpointError> {
    Ok(write_atomic(path, &encode_checkpoint(ckpt))?)
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint, CheckpointError> {
    decode_checkpoint(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn micro() -> ViTParams {
        let cfg = ViTConfig {
            image_size: 8,
            patch_size: 4,
            channels: 1,
            depth: 1,
            heads: 2,
            dim: 8,
            out_dim: 4,
            ..ViTConfig::default()
        };
        ViTParams::init(&cfg, &mut ChaCha8Rng::seed_from_u64(5)).unwrap()
    }

    #[test]
    fn roundtrip_with_and_without_projection() {
        let params = micro();
        let plain = Checkpoint {
            params: params.clone(),
            projection: None,
        };
        assert_eq!(decode_checkpoint(&encode_checkpoint(&plain)).unwrap(), plain);
        let with = Checkpoint {
            params,
            projection: Some(Projection {
                weight: Tensor::full(&[8, 3], 0.5),
                bias: Tensor::zeros(&[3]),
            }),
        };
        assert_eq!(decode_checkpoint(&encode_checkpoint(&with)).unwrap(), with);
    }

    #[test]
    fn corrupt_inputs_give_typed_errors() {
        let bytes = encode_checkpoint(&Checkpoint {
            params: micro(),
            projection: None,
        });
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_checkpoint(&bad), Err(CheckpointError::BadMagic(_))));
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(decode_checkpoint(&bad), Err(CheckpointError::UnsupportedVersion(9))));
        assert!(matches!(
            decode_checkpoint(&bytes[..bytes.len() - 3]),
            Err(CheckpointError::Tensor { .. }) | Err(CheckpointError::Truncated(_))
        ));
        let mut long = bytes.clone();
        long.push(0);
        assert!(matches!(decode_checkpoint(&long), Err(CheckpointError::TrailingBytes(1))));
    }
}
