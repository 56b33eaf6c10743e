//! Versioned binary checkpoint container.
//!
//! Layout: magic `AECK`, format version, a JSON metadata block, then
//! named tensors (shape header plus little-endian scalars), and a
//! trailing SHA-256 digest of everything before it. Round trips are
//! bit-exact; readers report the first violating section of corrupt
//! files.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::tensor::{Dtype, Scalar, Tensor};
use crate::error::{CorruptKind, Error, Result};

const MAGIC: &[u8; 4] = b"AECK";
const VERSION: u32 = 1;

/// Training metadata stored alongside the tensors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    /// Training stage tag (`pretrained`, `finetuned`, ...).
    pub stage: String,
    pub step_count: u64,
    /// Digest of the noise schedule, guarding train/inference mismatch.
    pub schedule_hash: String,
    pub config_digest: String,
    /// Free-form extra metadata (architecture, normalizer, ...).
    #[serde(default)]
    pub extra: serde_json::Value,
}

/// A parsed checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<S: Scalar> {
    pub meta: CheckpointMeta,
    pub tensors: BTreeMap<String, Tensor<S>>,
}

/// Serialize metadata and named tensors to `path`.
pub fn write_checkpoint<S: Scalar>(
    path: &Path,
    meta: &CheckpointMeta,
    tensors: &BTreeMap<String, Tensor<S>>,
) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());

    let meta_bytes = serde_json::to_vec(meta)
        .map_err(|e| Error::Validation(format!("unserializable checkpoint metadata: {e}")))?;
    buf.extend_from_slice(&(meta_bytes.len() as u32).to_le_bytes());
    buf.extend_from_slice(&meta_bytes);

    buf.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, tensor) in tensors {
        let name_bytes = name.as_bytes();
        buf.extend_from_slice(&(name_bytes.len() as u16).to_le_bytes());
        buf.extend_from_slice(name_bytes);
        buf.push(S::DTYPE.tag());
        buf.push(tensor.shape().len() as u8);
        for &d in tensor.shape() {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in tensor.data() {
            v.write_le(&mut buf);
        }
    }

    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(&digest);

    let display = path.display().to_string();
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(&display, e))?;
    f.write_all(&buf).map_err(|e| Error::io(&display, e))?;
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a str,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, section: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Corrupt {
                path: self.path.to_string(),
                kind: CorruptKind::Truncated,
                position: format!("{section} (byte {})", self.pos),
            });
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u16(&mut self, section: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, section)?.try_into().unwrap()))
    }

    fn u32(&mut self, section: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, section)?.try_into().unwrap()))
    }
}

/// Read a checkpoint written at the same scalar precision.
pub fn read_checkpoint<S: Scalar>(path: &Path) -> Result<Checkpoint<S>> {
    let display = path.display().to_string();
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(&display, e))?;

    if bytes.len() < 32 {
        return Err(Error::Corrupt {
            path: display,
            kind: CorruptKind::Truncated,
            position: "digest trailer".to_string(),
        });
    }
    let (body, trailer) = bytes.split_at(bytes.len() - 32);
    let digest = Sha256::digest(body);
    if digest.as_slice() != trailer {
        return Err(Error::Corrupt {
            path: display,
            kind: CorruptKind::ChecksumMismatch,
            position: "digest trailer".to_string(),
        });
    }

    let mut cur = Cursor {
        bytes: body,
        pos: 0,
        path: &display,
    };
    let magic = cur.take(4, "magic")?;
    if magic != MAGIC {
        return Err(Error::Corrupt {
            path: display,
            kind: CorruptKind::VersionMismatch,
            position: "magic (byte 0)".to_string(),
        });
    }
    let version = cur.u32("version")?;
    if version != VERSION {
        return Err(Error::Corrupt {
            path: display,
            kind: CorruptKind::VersionMismatch,
            position: format!("version {version} (expected {VERSION})"),
        });
    }
    let meta_len = cur.u32("metadata length")? as usize;
    let meta_bytes = cur.take(meta_len, "metadata")?;
    let meta: CheckpointMeta = serde_json::from_slice(meta_bytes).map_err(|e| Error::Corrupt {
        path: display.clone(),
        kind: CorruptKind::Malformed,
        position: format!("metadata JSON: {e}"),
    })?;

    let count = cur.u32("tensor count")? as usize;
    let mut tensors = BTreeMap::new();
    for i in 0..count {
        let section = format!("tensor {i}");
        let name_len = cur.u16(&section)? as usize;
        let name_bytes = cur.take(name_len, &section)?;
        let name = std::str::from_utf8(name_bytes)
            .map_err(|_| Error::Corrupt {
                path: display.clone(),
                kind: CorruptKind::Malformed,
                position: format!("{section} name"),
            })?
            .to_string();
        let dtype_tag = cur.take(1, &section)?[0];
        let dtype = Dtype::from_tag(dtype_tag).ok_or_else(|| Error::Corrupt {
            path: display.clone(),
            kind: CorruptKind::Malformed,
            position: format!("{section} dtype tag {dtype_tag}"),
        })?;
        if dtype != S::DTYPE {
            return Err(Error::Validation(format!(
                "checkpoint tensor {name} stored as {dtype:?}, requested {:?}",
                S::DTYPE
            )));
        }
        let ndim = cur.take(1, &section)?[0] as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(cur.u32(&section)? as usize);
        }
        let n: usize = shape.iter().product();
        let raw = cur.take(n * dtype.size(), &section)?;
        let data: Vec<S> = raw.chunks_exact(dtype.size()).map(S::read_le).collect();
        tensors.insert(name, Tensor::from_vec(shape, data)?);
    }
    if cur.pos != body.len() {
        return Err(Error::Corrupt {
            path: display.clone(),
            kind: CorruptKind::Malformed,
            position: format!("{} trailing bytes after tensors", body.len() - cur.pos),
        });
    }
    Ok(Checkpoint { meta, tensors })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::derive_rng;

    fn sample_meta() -> CheckpointMeta {
        CheckpointMeta {
            stage: "pretrained".to_string(),
            step_count: 123,
            schedule_hash: "abcd".to_string(),
            config_digest: "ef01".to_string(),
            extra: serde_json::json!({"widths": [64, 64, 128]}),
        }
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("test.aeckpt");
        let mut rng = derive_rng(6, "ckpt", 0);
        let mut tensors = BTreeMap::new();
        tensors.insert("a.w0".to_string(), Tensor::<f32>::randn(vec![4, 3], &mut rng));
        tensors.insert("a.b0".to_string(), Tensor::<f32>::randn(vec![3], &mut rng));
        let meta = sample_meta();
        write_checkpoint(&path, &meta, &tensors).unwrap();
        let ck = read_checkpoint::<f32>(&path).unwrap();
        assert_eq!(ck.meta, meta);
        assert_eq!(ck.tensors, tensors);

        // Writing again produces identical bytes.
        let bytes1 = std::fs::read(&path).unwrap();
        write_checkpoint(&path, &meta, &tensors).unwrap();
        assert_eq!(bytes1, std::fs::read(&path).unwrap());
    }

    #[test]
    fn truncation_is_located() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.aeckpt");
        let mut tensors = BTreeMap::new();
        tensors.insert(
            "x".to_string(),
            Tensor::<f32>::randn(vec![8], &mut derive_rng(6, "ckpt", 1)),
        );
        write_checkpoint(&path, &sample_meta(), &tensors).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 40]).unwrap();
        match read_checkpoint::<f32>(&path) {
            Err(Error::Corrupt { kind, .. }) => {
                assert!(matches!(
                    kind,
                    CorruptKind::Truncated | CorruptKind::ChecksumMismatch
                ));
            }
            other => panic!("expected corrupt error, got {other:?}"),
        }
    }

    #[test]
    fn flipped_byte_fails_checksum() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.aeckpt");
        let mut tensors = BTreeMap::new();
        tensors.insert(
            "x".to_string(),
            Tensor::<f32>::randn(vec![8], &mut derive_rng(6, "ckpt", 2)),
        );
        write_checkpoint(&path, &sample_meta(), &tensors).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0xff;
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            read_checkpoint::<f32>(&path),
            Err(Error::Corrupt {
                kind: CorruptKind::ChecksumMismatch,
                ..
            })
        ));
    }

    #[test]
    fn wrong_magic_is_version_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.aeckpt");
        let mut body = b"NOPE".to_vec();
        body.extend_from_slice(&1u32.to_le_bytes());
        let digest = Sha256::digest(&body);
        body.extend_from_slice(&digest);
        std::fs::write(&path, &body).unwrap();
        assert!(matches!(
            read_checkpoint::<f32>(&path),
            Err(Error::Corrupt {
                kind: CorruptKind::VersionMismatch,
                ..
            })
        ));
    }

    #[test]
    fn dtype_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.aeckpt");
        let mut tensors = BTreeMap::new();
        tensors.insert(
            "x".to_string(),
            Tensor::<f32>::randn(vec![2], &mut derive_rng(6, "ckpt", 3)),
        );
        write_checkpoint(&path, &sample_meta(), &tensors).unwrap();
        assert!(matches!(
            read_checkpoint::<f64>(&path),
            Err(Error::Validation(_))
        ));
    }
}
