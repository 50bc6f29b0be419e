//! Weight files: `RINV`, `u32` version, `u32`-length-prefixed config JSON,
//! then every tensor's values as little-endian `f32` in declaration order.
//! Shapes are implied by the config.

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::{DenoiserConfig, DenoiserParams};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"RINV";
pub const WEIGHTS_VERSION: u32 = 1;

pub fn weights_to_bytes(params: &DenoiserParams) -> Result<Vec<u8>> {
    let config = serde_json::to_vec(&params.config)?;
    let mut out = Vec::with_capacity(12 + config.len() + 4 * params.param_count());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&WEIGHTS_VERSION.to_le_bytes());
    out.extend_from_slice(&(config.len() as u32).to_le_bytes());
    out.extend_from_slice(&config);
    for t in params.tensors() {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

fn read_u32(bytes: &[u8], pos: &mut usize, what: &str) -> Result<u32> {
    let b = bytes
        .get(*pos..*pos + 4)
        .ok_or_else(|| Error::Format(format!("truncated before {what}")))?;
    *pos += 4;
    Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")))
}

pub fn weights_from_bytes(bytes: &[u8]) -> Result<DenoiserParams> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(Error::Format("missing RINV magic".into()));
    }
    let mut pos = 4;
    let version = read_u32(bytes, &mut pos, "version")?;
    if version != WEIGHTS_VERSION {
        return Err(Error::Version {
            found: version,
            expected: WEIGHTS_VERSION,
        });
    }
    let len = read_u32(bytes, &mut pos, "config length")? as usize;
    let json = bytes
        .get(pos..pos + len)
        .ok_or_else(|| Error::Format("truncated config".into()))?;
    pos += len;
    let config: DenoiserConfig = serde_json::from_slice(json)?;
    config.validate()?;

    let shapes = config.param_shapes();
    let expected: usize = shapes.iter().map(|s| s.iter().product::<usize>()).sum();
    let body = &bytes[pos..];
    if body.len() != 4 * expected {
        return Err(Error::Format(format!(
            "tensor body holds {} bytes, config needs {}",
            body.len(),
            4 * expected
        )));
    }
    let mut values = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")));
    let mut tensors = Vec::with_capacity(shapes.len());
    for shape in shapes {
        let n = shape.iter().product();
        tensors.push(Tensor::new(shape, values.by_ref().take(n).collect())?);
    }
    DenoiserParams::from_tensors(config, tensors)
}

pub fn save_weights(params: &DenoiserParams, path: &Path) -> Result<()> {
    fs::write(path, weights_to_bytes(params)?).map_err(|e| Error::io(path, e))
}

pub fn load_weights(path: &Path) -> Result<DenoiserParams> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    weights_from_bytes(&bytes)
}

/// SHA-256 of the serialized weight file, hex encoded.
pub fn weights_hash(params: &DenoiserParams) -> Result<String> {
    Ok(hex::encode(Sha256::digest(weights_to_bytes(params)?)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::NoiseSchedule;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn params() -> DenoiserParams {
        let mut cfg = DenoiserConfig::base(NoiseSchedule::default_linear());
        cfg.hidden = 16;
        DenoiserParams::init(cfg, &mut ChaCha8Rng::seed_from_u64(5)).unwrap()
    }

    #[test]
    fn round_trip_is_bitwise() {
        let p = params();
        let bytes = weights_to_bytes(&p).unwrap();
        let back = weights_from_bytes(&bytes).unwrap();
        assert_eq!(back, p);
        assert_eq!(weights_to_bytes(&back).unwrap(), bytes);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.rinv");
        save_weights(&p, &path).unwrap();
        assert_eq!(load_weights(&path).unwrap(), p);
    }

    #[test]
    fn truncation_and_version_are_refused() {
        let bytes = weights_to_bytes(&params()).unwrap();
        for cut in [0, 3, 7, 11, 40, bytes.len() - 1] {
            assert!(weights_from_bytes(&bytes[..cut]).is_err(), "cut {cut}");
        }
        let mut wrong = bytes.clone();
        wrong[4..8].copy_from_slice(&7u32.to_le_bytes());
        let err = weights_from_bytes(&wrong).unwrap_err();
        assert!(matches!(err, Error::Version { found: 7, .. }));
        assert!(err.to_string().contains('7'));
        let mut magic = bytes;
        magic[0] = b'X';
        assert!(matches!(weights_from_bytes(&magic), Err(Error::Format(_))));
    }

    #[test]
    fn hash_tracks_content() {
        let p = params();
        assert_eq!(weights_hash(&p).unwrap(), weights_hash(&p.clone()).unwrap());
        let mut q = p.clone();
        q.tensors_mut()[0] = Tensor::zeros(q.tensors()[0].shape());
        assert_ne!(weights_hash(&p).unwrap(), weights_hash(&q).unwrap());
    }
}
