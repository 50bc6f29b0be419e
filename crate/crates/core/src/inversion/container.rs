//! Binary track container: `RTRK`, `u32` version, 32-byte schedule hash,
//! `u32` tensor count, `u32` values per tensor, then the values as
//! little-endian `f32`. Tensors are stored as `1 x len` rows.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"RTRK";
pub const TRACK_VERSION: u32 = 1;

pub fn encode_tensors(schedule_hash: &[u8; 32], tensors: &[Tensor]) -> Result<Vec<u8>> {
    let len = tensors.first().map_or(0, Tensor::numel);
    if tensors.iter().any(|t| t.numel() != len) {
        return Err(Error::invalid("track tensors must all have the same size"));
    }
    let mut out = Vec::with_capacity(44 + 4 * len * tensors.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&TRACK_VERSION.to_le_bytes());
    out.extend_from_slice(schedule_hash);
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    out.extend_from_slice(&(len as u32).to_le_bytes());
    for t in tensors {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

fn u32_at(bytes: &[u8], pos: usize) -> Result<u32> {
    bytes
        .get(pos..pos + 4)
        .map(|b| u32::from_le_bytes(b.try_into().expect("4 bytes")))
        .ok_or_else(|| Error::Format("truncated track header".into()))
}

/// Returns the schedule hash and the stored tensors.
pub fn decode_tensors(bytes: &[u8]) -> Result<([u8; 32], Vec<Tensor>)> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(Error::Format("missing RTRK magic".into()));
    }
    let version = u32_at(bytes, 4)?;
    if version != TRACK_VERSION {
        return Err(Error::Version {
            found: version,
            expected: TRACK_VERSION,
        });
    }
    let hash: [u8; 32] = bytes
        .get(8..40)
        .ok_or_else(|| Error::Format("truncated track header".into()))?
        .try_into()
        .expect("32 bytes");
    let count = u32_at(bytes, 40)? as usize;
    let len = u32_at(bytes, 44)? as usize;
    let body = &bytes[48..];
    if body.len() != 4 * count * len {
        return Err(Error::Format(format!(
            "track body holds {} bytes, header needs {}",
            body.len(),
            4 * count * len
        )));
    }
    let values: Vec<f32> = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    let tensors = values
        .chunks(len.max(1))
        .take(count)
        .map(|c| Tensor::new(vec![1, len], c.to_vec()))
        .collect::<Result<Vec<_>>>()?;
    Ok((hash, tensors))
}
