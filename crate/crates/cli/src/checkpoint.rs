//! Binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic     8 bytes   "MOELABCK"
//! version   u32
//! meta_len  u64, then meta_len bytes of JSON (CheckpointMeta)
//! count     u64, then per parameter:
//!     name_len u32, name (UTF-8)
//!     ndim     u32, ndim x u64 dims
//!     values   prod(dims) x f64
//! sha256    32 bytes over everything above
//! ```
//!
//! Encoding is a pure function of the model and metadata, so
//! save, load and save again yields identical bytes.

use std::path::Path;

use moelab::model::{LanguageModel, ModelConfig};
use moelab::rng::{stream, Stream};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, Result};
use crate::report::{atomic_write, Provenance};

pub const MAGIC: &[u8; 8] = b"MOELABCK";
pub const FORMAT_VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub role: String,
    pub model: ModelConfig,
    pub provenance: Provenance,
}

pub fn encode(model: &LanguageModel, meta: &CheckpointMeta) -> Vec<u8> {
    let meta_json = serde_json::to_vec(meta).expect("meta serializes");
    let params = model.named_params();
    let mut out = Vec::with_capacity(64 + meta_json.len() + 8 * model.param_count());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(meta_json.len() as u64).to_le_bytes());
    out.extend_from_slice(&meta_json);
    out.extend_from_slice(&(params.len() as u64).to_le_bytes());
    for (name, t) in params {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self
            .at
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| format!("truncated at byte {}", self.at))?;
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self) -> std::result::Result<usize, String> {
        usize::try_from(self.u64()?).map_err(|_| "length overflows".to_string())
    }
}

/// Parses and verifies a container; the error string names the problem.
pub fn decode(bytes: &[u8]) -> std::result::Result<(LanguageModel, CheckpointMeta), String> {
    if bytes.len() < MAGIC.len() + 4 + DIGEST_LEN || &bytes[..MAGIC.len()] != MAGIC {
        return Err("not a moelab checkpoint".into());
    }
    let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
    if Sha256::digest(body).as_slice() != digest {
        return Err("checksum mismatch (file corrupted or truncated)".into());
    }
    let mut r = Reader {
        bytes: body,
        at: MAGIC.len(),
    };
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(format!("format version {version}, expected {FORMAT_VERSION}"));
    }
    let meta_len = r.len()?;
    let meta: CheckpointMeta =
        serde_json::from_slice(r.take(meta_len)?).map_err(|e| format!("metadata: {e}"))?;
    let mut model = LanguageModel::new(meta.model.clone(), &mut stream(0, Stream::Init))
        .map_err(|e| format!("model config: {e}"))?;
    let count = r.len()?;
    let mut params = model.named_params_mut();
    if count != params.len() {
        return Err(format!("{count} parameters stored, architecture has {}", params.len()));
    }
    for (name, t) in params.iter_mut() {
        let name_len = r.u32()? as usize;
        let stored = std::str::from_utf8(r.take(name_len)?).map_err(|_| "parameter name is not UTF-8")?;
        if stored != name {
            return Err(format!("parameter {stored:?} where {name:?} was expected"));
        }
        let ndim = r.u32()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.len()?);
        }
        if shape != t.shape() {
            return Err(format!("{name}: stored shape {shape:?}, expected {:?}", t.shape()));
        }
        let raw = r.take(t.len() * 8)?;
        for (dst, chunk) in t.data_mut().iter_mut().zip(raw.chunks_exact(8)) {
            *dst = f64::from_le_bytes(chunk.try_into().expect("8 bytes"));
        }
    }
    drop(params);
    if r.at != body.len() {
        return Err(format!("{} trailing bytes", body.len() - r.at));
    }
    Ok((model, meta))
}

pub fn save(path: &Path, model: &LanguageModel, meta: &CheckpointMeta) -> Result<()> {
    atomic_write(path, &encode(model, meta))
}

pub fn load(path: &Path) -> Result<(LanguageModel, CheckpointMeta)> {
    let bytes = match std::fs::read(path) {
        Ok(b) => b,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            return Err(CliError::MissingCheckpoint(path.to_path_buf()))
        }
        Err(e) => return Err(CliError::io(path, e)),
    };
    decode(&bytes).map_err(|reason| CliError::Checkpoint {
        path: path.to_path_buf(),
        reason,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> (LanguageModel, CheckpointMeta) {
        let mut cfg = ModelConfig::desk_teacher();
        cfg.d_model = 8;
        cfg.d_ff = 8;
        cfg.n_heads = 2;
        cfg.max_seq_len = 8;
        let model = LanguageModel::new(cfg.clone(), &mut stream(3, Stream::Init)).unwrap();
        let meta = CheckpointMeta {
            role: "teacher".into(),
            model: cfg,
            provenance: Provenance::new("00".into(), 3),
        };
        (model, meta)
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let (m, meta) = tiny();
        let bytes = encode(&m, &meta);
        let (back, meta2) = decode(&bytes).unwrap();
        assert_eq!(meta2, meta);
        assert_eq!(back.checksums(), m.checksums());
        assert_eq!(encode(&back, &meta2), bytes);
    }

    #[test]
    fn any_flipped_byte_is_detected() {
        let (m, meta) = tiny();
        let bytes = encode(&m, &meta);
        for at in [0, 9, 20, bytes.len() / 2, bytes.len() - 1] {
            let mut bad = bytes.clone();
            bad[at] ^= 0x40;
            assert!(decode(&bad).is_err(), "flip at {at} went unnoticed");
        }
        assert!(decode(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn missing_file_names_the_path() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("nope.ckpt");
        let e = load(&p).unwrap_err();
        assert!(e.to_string().contains("nope.ckpt"));
        assert_eq!(e.exit_code(), CliError::EXIT_IO);
    }
}
