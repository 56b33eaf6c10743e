//! On-disk episode container.
//!
//! An episode is a structured-text file (`.aej`): one JSON header line
//! with the metadata, format version, and content checksums, then one
//! JSON line per step. Point clouds live in a sibling binary blob
//! (`.apc`): magic, cloud count, then per cloud a flag byte, a point
//! count, and little-endian f32 triplets. Readers report the first
//! violation they find (version, truncation, checksum, or parse
//! position).

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{EpisodeMeta, EpisodeRecord, EpisodeStep, Manifest, FORMAT_VERSION};
use crate::error::{CorruptKind, Error, Result};
use crate::geometry::Vec3;
use crate::pointcloud::PointCloud;

const BLOB_MAGIC: &[u8; 4] = b"APC1";

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format: String,
    version: String,
    meta: EpisodeMeta,
    step_count: usize,
    cloud_file: String,
    sha256_steps: String,
    sha256_clouds: String,
}

fn hex(digest: &[u8]) -> String {
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// Write `record` as `<stem>.aej` plus `<stem>.apc` in `dir`.
/// Returns the two digests (episode file, cloud blob).
pub fn write_episode(dir: &Path, stem: &str, record: &EpisodeRecord) -> Result<(String, String)> {
    record.validate()?;

    // Clouds must be raw (base frame): the blob stores bare points.
    for (i, c) in record.clouds.iter().enumerate() {
        if c.normalization.is_some() {
            return Err(Error::Validation(format!(
                "cloud {i} is normalized; episodes store raw clouds"
            )));
        }
    }

    let mut blob: Vec<u8> = Vec::new();
    blob.extend_from_slice(BLOB_MAGIC);
    blob.extend_from_slice(&(record.clouds.len() as u32).to_le_bytes());
    for c in &record.clouds {
        blob.push(u8::from(c.empty_after_crop));
        blob.extend_from_slice(&(c.points.len() as u32).to_le_bytes());
        for p in &c.points {
            for v in p.to_array() {
                blob.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
    }
    let sha_clouds = hex(&Sha256::digest(&blob));

    let mut step_bytes: Vec<u8> = Vec::new();
    for s in &record.steps {
        let line = serde_json::to_string(s)
            .map_err(|e| Error::Validation(format!("unserializable step: {e}")))?;
        step_bytes.extend_from_slice(line.as_bytes());
        step_bytes.push(b'\n');
    }
    let sha_steps = hex(&Sha256::digest(&step_bytes));

    let cloud_file = format!("{stem}.apc");
    let header = Header {
        format: "aej".to_string(),
        version: FORMAT_VERSION.to_string(),
        meta: record.meta.clone(),
        step_count: record.steps.len(),
        cloud_file: cloud_file.clone(),
        sha256_steps: sha_steps,
        sha256_clouds: sha_clouds,
    };
    let header_line = serde_json::to_string(&header)
        .map_err(|e| Error::Validation(format!("unserializable header: {e}")))?;

    let ep_path = dir.join(format!("{stem}.aej"));
    let ep_display = ep_path.display().to_string();
    let mut f = std::fs::File::create(&ep_path).map_err(|e| Error::io(&ep_display, e))?;
    f.write_all(header_line.as_bytes())
        .and_then(|_| f.write_all(b"\n"))
        .and_then(|_| f.write_all(&step_bytes))
        .map_err(|e| Error::io(&ep_display, e))?;

    let blob_path = dir.join(&cloud_file);
    let blob_display = blob_path.display().to_string();
    std::fs::write(&blob_path, &blob).map_err(|e| Error::io(&blob_display, e))?;

    let mut ep_bytes = header_line.into_bytes();
    ep_bytes.push(b'\n');
    ep_bytes.extend_from_slice(&step_bytes);
    Ok((hex(&Sha256::digest(&ep_bytes)), header.sha256_clouds))
}

/// Read and fully verify an episode container.
pub fn read_episode(path: &Path) -> Result<EpisodeRecord> {
    let display = path.display().to_string();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(&display, e))?;
    let mut lines = text.split_inclusive('\n');

    let header_line = lines.next().ok_or_else(|| Error::Corrupt {
        path: display.clone(),
        kind: CorruptKind::Truncated,
        position: "header (line 1)".to_string(),
    })?;
    let header: Header = serde_json::from_str(header_line.trim_end()).map_err(|e| {
        Error::Corrupt {
            path: display.clone(),
            kind: CorruptKind::Malformed,
            position: format!("header (line 1): {e}"),
        }
    })?;
    if header.format != "aej" || header.version != FORMAT_VERSION {
        return Err(Error::Corrupt {
            path: display.clone(),
            kind: CorruptKind::VersionMismatch,
            position: format!(
                "header declares {}/{}, expected aej/{FORMAT_VERSION}",
                header.format, header.version
            ),
        });
    }

    let mut steps: Vec<EpisodeStep> = Vec::with_capacity(header.step_count);
    let mut step_bytes: Vec<u8> = Vec::new();
    for (i, line) in lines.enumerate() {
        if steps.len() == header.step_count {
            return Err(Error::Corrupt {
                path: display.clone(),
                kind: CorruptKind::Malformed,
                position: format!("unexpected extra line {}", i + 2),
            });
        }
        let step: EpisodeStep =
            serde_json::from_str(line.trim_end()).map_err(|e| Error::Corrupt {
                path: display.clone(),
                kind: CorruptKind::Malformed,
                position: format!("steps (line {}): {e}", i + 2),
            })?;
        steps.push(step);
        step_bytes.extend_from_slice(line.as_bytes());
        if !line.ends_with('\n') {
            step_bytes.push(b'\n');
        }
    }
    if steps.len() != header.step_count {
        return Err(Error::Corrupt {
            path: display.clone(),
            kind: CorruptKind::Truncated,
            position: format!(
                "steps: header declares {}, file has {}",
                header.step_count,
                steps.len()
            ),
        });
    }
    if hex(&Sha256::digest(&step_bytes)) != header.sha256_steps {
        return Err(Error::Corrupt {
            path: display.clone(),
            kind: CorruptKind::ChecksumMismatch,
            position: "steps".to_string(),
        });
    }

    let blob_path = path
        .parent()
        .unwrap_or_else(|| Path::new("."))
        .join(&header.cloud_file);
    let blob_display = blob_path.display().to_string();
    let mut blob = Vec::new();
    std::fs::File::open(&blob_path)
        .and_then(|mut f| f.read_to_end(&mut blob))
        .map_err(|e| Error::io(&blob_display, e))?;
    if hex(&Sha256::digest(&blob)) != header.sha256_clouds {
        return Err(Error::Corrupt {
            path: blob_display.clone(),
            kind: CorruptKind::ChecksumMismatch,
            position: "cloud blob".to_string(),
        });
    }
    let clouds = parse_blob(&blob, &blob_display)?;

    let record = EpisodeRecord {
        meta: header.meta,
        steps,
        clouds,
    };
    record.validate()?;
    Ok(record)
}

fn parse_blob(blob: &[u8], display: &str) -> Result<Vec<PointCloud>> {
    let mut pos = 0usize;
    let take = |pos: &mut usize, n: usize, section: &str| -> Result<std::ops::Range<usize>> {
        if *pos + n > blob.len() {
            return Err(Error::Corrupt {
                path: display.to_string(),
                kind: CorruptKind::Truncated,
                position: format!("{section} (byte {})", *pos),
            });
        }
        let r = *pos..*pos + n;
        *pos += n;
        Ok(r)
    };

    let magic = take(&mut pos, 4, "magic")?;
    if &blob[magic] != BLOB_MAGIC {
        return Err(Error::Corrupt {
            path: display.to_string(),
            kind: CorruptKind::VersionMismatch,
            position: "blob magic (byte 0)".to_string(),
        });
    }
    let r = take(&mut pos, 4, "cloud count")?;
    let count = u32::from_le_bytes(blob[r].try_into().unwrap()) as usize;
    let mut clouds = Vec::with_capacity(count);
    for i in 0..count {
        let section = format!("cloud {i}");
        let fr = take(&mut pos, 1, &section)?;
        let flag = blob[fr.start] != 0;
        let nr = take(&mut pos, 4, &section)?;
        let n = u32::from_le_bytes(blob[nr].try_into().unwrap()) as usize;
        let dr = take(&mut pos, n * 12, &section)?;
        let bytes = &blob[dr];
        let mut points = Vec::with_capacity(n);
        for chunk in bytes.chunks_exact(12) {
            let x = f32::from_le_bytes(chunk[0..4].try_into().unwrap()) as f64;
            let y = f32::from_le_bytes(chunk[4..8].try_into().unwrap()) as f64;
            let z = f32::from_le_bytes(chunk[8..12].try_into().unwrap()) as f64;
            points.push(Vec3::new(x, y, z));
        }
        let mut cloud = PointCloud::new(points)?;
        cloud.empty_after_crop = flag;
        clouds.push(cloud);
    }
    if pos != blob.len() {
        return Err(Error::Corrupt {
            path: display.to_string(),
            kind: CorruptKind::Malformed,
            position: format!("{} trailing bytes after clouds", blob.len() - pos),
        });
    }
    Ok(clouds)
}

/// Write a dataset manifest as pretty JSON.
pub fn write_manifest(path: &Path, manifest: &Manifest) -> Result<()> {
    let display = path.display().to_string();
    let json = serde_json::to_string_pretty(manifest)
        .map_err(|e| Error::Validation(format!("unserializable manifest: {e}")))?;
    std::fs::write(path, json.as_bytes()).map_err(|e| Error::io(&display, e))
}

pub fn read_manifest(path: &Path) -> Result<Manifest> {
    let display = path.display().to_string();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(&display, e))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::Corrupt {
        path: display.clone(),
        kind: CorruptKind::Malformed,
        position: format!("manifest JSON: {e}"),
    })?;
    if manifest.version != FORMAT_VERSION {
        return Err(Error::Corrupt {
            path: display,
            kind: CorruptKind::VersionMismatch,
            position: format!("manifest version {}", manifest.version),
        });
    }
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::super::tests::synth_episode;
    use super::*;
    use crate::simworld::TaskKind;

    #[test]
    fn roundtrip_is_structurally_identical() {
        let dir = tempfile::tempdir().unwrap();
        let ep = synth_episode(60, TaskKind::PickPlace);
        write_episode(dir.path(), "ep_0000", &ep).unwrap();
        let back = read_episode(&dir.path().join("ep_0000.aej")).unwrap();
        assert_eq!(ep, back);
    }

    #[test]
    fn rewrite_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let ep = synth_episode(61, TaskKind::Reach);
        write_episode(dir.path(), "a", &ep).unwrap();
        let bytes1 = std::fs::read(dir.path().join("a.aej")).unwrap();
        let blob1 = std::fs::read(dir.path().join("a.apc")).unwrap();
        write_episode(dir.path(), "a", &ep).unwrap();
        assert_eq!(bytes1, std::fs::read(dir.path().join("a.aej")).unwrap());
        assert_eq!(blob1, std::fs::read(dir.path().join("a.apc")).unwrap());
    }

    #[test]
    fn truncated_steps_are_located() {
        let dir = tempfile::tempdir().unwrap();
        let ep = synth_episode(62, TaskKind::Reach);
        write_episode(dir.path(), "t", &ep).unwrap();
        let path = dir.path().join("t.aej");
        let text = std::fs::read_to_string(&path).unwrap();
        let keep: Vec<&str> = text.lines().take(5).collect();
        std::fs::write(&path, keep.join("\n") + "\n").unwrap();
        match read_episode(&path) {
            Err(Error::Corrupt {
                kind: CorruptKind::Truncated,
                position,
                ..
            }) => assert!(position.contains("steps"), "position {position}"),
            other => panic!("expected truncation, got {other:?}"),
        }
    }

    #[test]
    fn flipped_step_byte_is_a_checksum_error() {
        let dir = tempfile::tempdir().unwrap();
        let ep = synth_episode(63, TaskKind::Reach);
        write_episode(dir.path(), "c", &ep).unwrap();
        let path = dir.path().join("c.aej");
        let mut text = std::fs::read_to_string(&path).unwrap();
        // Flip a digit inside a step line (keep JSON valid).
        let idx = text.rfind("\"gripper\":1.0").or_else(|| text.rfind("\"gripper\":0.0"));
        if let Some(i) = idx {
            let digit = i + "\"gripper\":".len();
            let old = text.as_bytes()[digit];
            let new = if old == b'1' { b'0' } else { b'1' };
            unsafe { text.as_bytes_mut()[digit] = new };
            std::fs::write(&path, &text).unwrap();
            assert!(matches!(
                read_episode(&path),
                Err(Error::Corrupt {
                    kind: CorruptKind::ChecksumMismatch,
                    ..
                })
            ));
        } else {
            panic!("no gripper field found to corrupt");
        }
    }

    #[test]
    fn truncated_blob_is_located() {
        let dir = tempfile::tempdir().unwrap();
        let ep = synth_episode(64, TaskKind::Reach);
        write_episode(dir.path(), "b", &ep).unwrap();
        let blob_path = dir.path().join("b.apc");
        let blob = std::fs::read(&blob_path).unwrap();
        std::fs::write(&blob_path, &blob[..blob.len() / 2]).unwrap();
        match read_episode(&dir.path().join("b.aej")) {
            Err(Error::Corrupt { kind, .. }) => assert!(matches!(
                kind,
                CorruptKind::Truncated | CorruptKind::ChecksumMismatch
            )),
            other => panic!("expected corrupt blob, got {other:?}"),
        }
    }

    #[test]
    fn version_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let ep = synth_episode(65, TaskKind::Reach);
        write_episode(dir.path(), "v", &ep).unwrap();
        let path = dir.path().join("v.aej");
        let text = std::fs::read_to_string(&path)
            .unwrap()
            .replacen("\"version\":\"v1\"", "\"version\":\"v9\"", 1);
        std::fs::write(&path, text).unwrap();
        assert!(matches!(
            read_episode(&path),
            Err(Error::Corrupt {
                kind: CorruptKind::VersionMismatch,
                ..
            })
        ));
    }

    #[test]
    fn manifest_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let m = Manifest {
            version: FORMAT_VERSION.to_string(),
            config_digest: "abc".to_string(),
            episodes: vec![],
        };
        let path = dir.path().join("manifest.json");
        write_manifest(&path, &m).unwrap();
        assert_eq!(read_manifest(&path).unwrap(), m);
    }
}
