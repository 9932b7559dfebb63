//! Tensor wire format: `u32` rank, `rank × u64` dims, then row-major
//! little-endian `f64` values.

use std::io::Write;

use super::{Result, Tensor, TensorError};
use crate::codec::ByteReader;

/// Upper bound on rank accepted by the decoder.
const MAX_RANK: u32 = 16;

pub fn encode_tensor(t: &Tensor, out: &mut Vec<u8>) {
    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn write_tensor(t: &Tensor, w: &mut impl Write) -> std::io::Result<()> {
    let mut buf = Vec::with_capacity(4 + 8 * (t.rank() + t.numel()));
    encode_tensor(t, &mut buf);
    w.write_all(&buf)
}

pub(crate) fn read_from(r: &mut ByteReader<'_>) -> Result<Tensor> {
    let err = |e: crate::codec::Truncated| TensorError::Decode(e.to_string());
    let rank = r.u32().map_err(err)?;
    if rank > MAX_RANK {
        return Err(TensorError::Decode(format!("rank {rank} exceeds {MAX_RANK}")));
    }
    let mut shape = Vec::with_capacity(rank as usize);
    let mut count: u64 = 1;
    for _ in 0..rank {
        let d = r.u64().map_err(err)?;
        if d == 0 {
            return Err(TensorError::Decode("zero-sized dimension".into()));
        }
        count = count
            .checked_mul(d)
            .ok_or_else(|| TensorError::Decode("element count overflows".into()))?;
        shape.push(usize::try_from(d).map_err(|_| TensorError::Decode("dimension too large".into()))?);
    }
    let bytes = r.ensure(count, 8).map_err(err)?;
    let data = r
        .take(bytes)
        .map_err(err)?
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();
    Tensor::new(&shape, data)
}

/// Decodes one tensor from the front of `bytes`, returning it with the
/// number of bytes consumed.
pub fn decode_tensor(bytes: &[u8]) -> Result<(Tensor, usize)> {
    let mut r = ByteReader::new(bytes);
    let t = read_from(&mut r)?;
    Ok((t, r.position()))
}

pub fn read_tensor(bytes: &[u8]) -> Result<Tensor> {
    let (t, used) = decode_tensor(bytes)?;
    if used != bytes.len() {
        return Err(TensorError::Decode(format!("{} trailing bytes", bytes.len() - used)));
    }
    Ok(t)
}
