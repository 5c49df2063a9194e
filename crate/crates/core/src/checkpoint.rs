//! Binary checkpoint format.
//!
//! ```text
//! "MUE1"                      magic
//! u32                         format version (1)
//! u32                         tensor count
//! per tensor: u32 name length, UTF-8 name, u32 rows, u32 cols
//! f64 * Σ rows·cols           payload, manifest order
//! u64                         sum of payload bytes, wrapping
//! ```
//! All integers and floats are little-endian.

use std::fs;
use std::path::Path;

use crate::error::{CheckpointError, Error, Result};
use crate::model::{ModelConfig, ModelParams};
use crate::numerics::{SeededRng, Tensor2D};

pub const MAGIC: [u8; 4] = *b"MUE1";
pub const VERSION: u32 = 1;

fn payload_checksum(payload: &[u8]) -> u64 {
    payload.iter().fold(0u64, |acc, &b| acc.wrapping_add(u64::from(b)))
}

pub fn to_bytes(params: &ModelParams) -> Vec<u8> {
    let named = params.named();
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(named.len() as u32).to_le_bytes());
    for (name, t) in &named {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rows() as u32).to_le_bytes());
        out.extend_from_slice(&(t.cols() as u32).to_le_bytes());
    }
    let start = out.len();
    for (_, t) in &named {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let checksum = payload_checksum(&out[start..]);
    out.extend_from_slice(&checksum.to_le_bytes());
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or(CheckpointError::Truncated(what))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self, what: &'static str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &'static str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

/// Parses a checkpoint and checks it against the tensors `cfg` implies.
pub fn from_bytes(bytes: &[u8], cfg: &ModelConfig) -> Result<ModelParams> {
    let mut r = Reader { bytes, pos: 0 };
    let magic: [u8; 4] = r.take(4, "magic")?.try_into().expect("4 bytes");
    if magic != MAGIC {
        return Err(CheckpointError::BadMagic(magic).into());
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(CheckpointError::BadVersion(version).into());
    }
    let count = r.u32("tensor count")? as usize;
    let mut manifest = Vec::new();
    for _ in 0..count {
        let len = r.u32("tensor name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "tensor name")?)
            .map_err(|_| CheckpointError::Manifest("tensor name is not UTF-8".into()))?
            .to_string();
        let rows = r.u32("tensor rows")? as usize;
        let cols = r.u32("tensor cols")? as usize;
        manifest.push((name, rows, cols));
    }
    let scalars = manifest
        .iter()
        .try_fold(0usize, |acc, (_, rows, cols)| rows.checked_mul(*cols).and_then(|n| acc.checked_add(n)))
        .and_then(|n| n.checked_mul(8))
        .ok_or_else(|| CheckpointError::Manifest("tensor sizes overflow".into()))?;
    let payload = r.take(scalars, "payload")?;
    let stored = r.u64("checksum")?;
    if r.pos != bytes.len() {
        return Err(CheckpointError::Manifest(format!("{} trailing bytes", bytes.len() - r.pos)).into());
    }
    let computed = payload_checksum(payload);
    if stored != computed {
        return Err(CheckpointError::Checksum { stored, computed }.into());
    }

    let mut params = ModelParams::init(cfg, &mut SeededRng::new(0))?;
    let expected: Vec<(String, (usize, usize))> = params.named().into_iter().map(|(n, t)| (n, t.shape())).collect();
    for (i, (name, shape)) in expected.iter().enumerate() {
        match manifest.get(i) {
            Some((found_name, rows, cols)) if found_name == name && (*rows, *cols) == *shape => {}
            Some((found_name, rows, cols)) if found_name == name => {
                return Err(CheckpointError::TensorShape {
                    name: name.clone(),
                    expected: *shape,
                    found: (*rows, *cols),
                }
                .into());
            }
            _ => {
                let found = manifest
                    .iter()
                    .find(|(n, _, _)| n == name)
                    .map_or((0, 0), |(_, r, c)| (*r, *c));
                return Err(CheckpointError::TensorShape {
                    name: name.clone(),
                    expected: *shape,
                    found,
                }
                .into());
            }
        }
    }
    if let Some((extra, rows, cols)) = manifest.get(expected.len()) {
        return Err(CheckpointError::TensorShape {
            name: extra.clone(),
            expected: (0, 0),
            found: (*rows, *cols),
        }
        .into());
    }

    let mut offset = 0;
    params.visit_mut(|_, t| {
        for v in t.data_mut() {
            *v = f64::from_le_bytes(payload[offset..offset + 8].try_into().expect("8 bytes"));
            offset += 8;
        }
    });
    Ok(params)
}

pub fn save_checkpoint(params: &ModelParams, path: &Path) -> Result<()> {
    fs::write(path, to_bytes(params))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path, cfg: &ModelConfig) -> Result<ModelParams> {
    let bytes = fs::read(path)?;
    from_bytes(&bytes, cfg)
}

/// Shapes of every tensor in a checkpoint, without validating against a config.
pub fn manifest(bytes: &[u8]) -> Result<Vec<(String, (usize, usize))>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::Checkpoint(CheckpointError::BadMagic(
            bytes[..4].try_into().expect("4 bytes"),
        )));
    }
    let _ = r.u32("version")?;
    let count = r.u32("tensor count")? as usize;
    (0..count)
        .map(|_| {
            let len = r.u32("tensor name length")? as usize;
            let name = String::from_utf8_lossy(r.take(len, "tensor name")?).into_owned();
            let rows = r.u32("tensor rows")? as usize;
            let cols = r.u32("tensor cols")? as usize;
            Ok((name, (rows, cols)))
        })
        .collect()
}

/// Convenience for tests and tools: one tensor's values by name.
pub fn tensor_by_name<'a>(params: &'a ModelParams, name: &str) -> Option<&'a Tensor2D> {
    params.named().into_iter().find(|(n, _)| n == name).map(|(_, t)| t)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> ModelConfig {
        ModelConfig {
            n_enc_layers: 2,
            n_dec_layers: 2,
            d_model: 8,
            n_heads: 2,
            d_ff: 16,
            vocab_size: 30,
            grid_side: 3,
            max_text_len: 8,
            max_gen_len: 6,
            rel_bucket_count: 5,
            tie_embeddings: true,
        }
    }

    fn params() -> ModelParams {
        let mut p = ModelParams::init(&cfg(), &mut SeededRng::new(4)).unwrap();
        p.patch_bias.data_mut()[0] = -0.0;
        p.patch_bias.data_mut()[1] = f64::MIN_POSITIVE / 8.0;
        p
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let p = params();
        let bytes = to_bytes(&p);
        let back = from_bytes(&bytes, &cfg()).unwrap();
        for ((n1, a), (n2, b)) in p.named().iter().zip(back.named()) {
            assert_eq!(n1, &n2);
            let bits = |t: &Tensor2D| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(a), bits(b));
        }
        assert_eq!(to_bytes(&back), bytes);
    }

    #[test]
    fn header_layout() {
        let bytes = to_bytes(&params());
        assert_eq!(&bytes[..4], b"MUE1");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        let count = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        assert_eq!(count, params().refs().len());
        let name_len = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
        assert_eq!(&bytes[16..16 + name_len], b"token_embedding");
        let m = manifest(&bytes).unwrap();
        assert_eq!(m[0], ("token_embedding".to_string(), (30, 8)));
    }

    #[test]
    fn every_truncation_is_rejected() {
        let bytes = to_bytes(&params());
        for cut in (0..bytes.len()).step_by(37).chain([bytes.len() - 1]) {
            let err = from_bytes(&bytes[..cut], &cfg()).unwrap_err();
            assert!(
                matches!(err, Error::Checkpoint(CheckpointError::Truncated(_) | CheckpointError::BadMagic(_))),
                "cut {cut}: {err}"
            );
        }
    }

    #[test]
    fn corruption_errors_are_distinct() {
        let bytes = to_bytes(&params());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(from_bytes(&bad, &cfg()), Err(Error::Checkpoint(CheckpointError::BadMagic(_)))));
        let mut bad = bytes.clone();
        bad[4] = 2;
        assert!(matches!(from_bytes(&bad, &cfg()), Err(Error::Checkpoint(CheckpointError::BadVersion(2)))));
        let mut bad = bytes.clone();
        let n = bad.len();
        bad[n - 20] ^= 0x40;
        assert!(matches!(from_bytes(&bad, &cfg()), Err(Error::Checkpoint(CheckpointError::Checksum { .. }))));
    }

    #[test]
    fn layer_count_mismatch_names_a_tensor() {
        let bytes = to_bytes(&params());
        let deeper = ModelConfig {
            n_dec_layers: 3,
            ..cfg()
        };
        match from_bytes(&bytes, &deeper) {
            Err(Error::Checkpoint(CheckpointError::TensorShape { name, .. })) => assert!(name.starts_with("decoder")),
            other => panic!("{other:?}"),
        }
        let wider = ModelConfig {
            d_ff: 32,
            ..cfg()
        };
        match from_bytes(&bytes, &wider) {
            Err(Error::Checkpoint(CheckpointError::TensorShape { name, expected, found })) => {
                assert_eq!(name, "encoder.0.ffn.w1");
                assert_eq!((expected, found), ((8, 32), (8, 16)));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&params(), &path).unwrap();
        let back = load_checkpoint(&path, &cfg()).unwrap();
        assert_eq!(back, params());
        assert_eq!(tensor_by_name(&back, "patch.bias").unwrap().data()[0].to_bits(), (-0.0f64).to_bits());
    }
}
