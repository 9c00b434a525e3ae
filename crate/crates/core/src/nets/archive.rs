//! Named-tensor archives for network checkpoints.
//!
//! ```text
//! "HARP" | version u32 | entry_count u32
//! per entry: name_len u32 | name utf-8 | ndim u32 | dims u64 × ndim | f64 × prod(dims)
//! SHA-256 of all preceding bytes
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{build, ModelConfig, NetworkHandle, Role};
use crate::error::{Error, Result};

pub const ARCHIVE_MAGIC: &[u8; 4] = b"HARP";
const ARCHIVE_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct ArchiveEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

pub fn encode_archive(entries: &[ArchiveEntry]) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(ARCHIVE_MAGIC);
    buf.extend_from_slice(&ARCHIVE_VERSION.to_le_bytes());
    buf.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for e in entries {
        buf.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
        buf.extend_from_slice(e.name.as_bytes());
        buf.extend_from_slice(&(e.shape.len() as u32).to_le_bytes());
        for &d in &e.shape {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in &e.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(digest.as_slice());
    buf
}

pub fn decode_archive(bytes: &[u8]) -> Result<Vec<ArchiveEntry>> {
    if bytes.len() < 12 + 32 || &bytes[..4] != ARCHIVE_MAGIC {
        return Err(Error::Invalid("not a HARP archive".into()));
    }
    let (body, stored) = bytes.split_at(bytes.len() - 32);
    let digest = Sha256::digest(body);
    if digest.as_slice() != stored {
        return Err(Error::Checksum {
            expected: hex::encode(stored),
            found: hex::encode(digest.as_slice()),
        });
    }
    let mut pos = 4;
    let mut take = |n: usize| -> Result<&[u8]> {
        let end = pos + n;
        if end > body.len() {
            return Err(Error::Invalid("archive truncated".into()));
        }
        let s = &body[pos..end];
        pos = end;
        Ok(s)
    };
    let u32_at = |s: &[u8]| u32::from_le_bytes(s.try_into().unwrap()) as usize;
    let version = u32_at(take(4)?);
    if version != ARCHIVE_VERSION as usize {
        return Err(Error::Invalid(format!("unsupported archive version {version}")));
    }
    let count = u32_at(take(4)?);
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = u32_at(take(4)?);
        let name = String::from_utf8(take(name_len)?.to_vec())
            .map_err(|_| Error::Invalid("archive entry name is not UTF-8".into()))?;
        let ndim = u32_at(take(4)?);
        let shape: Vec<usize> = take(ndim * 8)?
            .chunks_exact(8)
            .map(|c| u64::from_le_bytes(c.try_into().unwrap()) as usize)
            .collect();
        let n: usize = shape.iter().product();
        let data = take(n * 8)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        entries.push(ArchiveEntry { name, shape, data });
    }
    if pos != body.len() {
        return Err(Error::Invalid("trailing bytes in archive".into()));
    }
    Ok(entries)
}

/// Sidecar describing one network archive.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkManifest {
    pub role: Role,
    pub config: ModelConfig,
    pub shapes: BTreeMap<String, Vec<usize>>,
    /// Training RNG state at save time, if the caller has one.
    #[serde(default)]
    pub rng_state: Option<serde_json::Value>,
    pub sha256: String,
}

fn entries_of(handle: &NetworkHandle) -> Vec<ArchiveEntry> {
    let params = handle.net.params().into_iter().map(|p| ArchiveEntry {
        name: p.name.clone(),
        shape: p.shape.clone(),
        data: p.value.clone(),
    });
    let buffers = handle.net.buffers().into_iter().map(|b| ArchiveEntry {
        name: b.name.clone(),
        shape: vec![b.value.len()],
        data: b.value.clone(),
    });
    params.chain(buffers).collect()
}

pub fn archive_path(dir: &Path, role: Role) -> std::path::PathBuf {
    dir.join(format!("{}.params.bin", role.as_str()))
}

pub fn manifest_path(dir: &Path, role: Role) -> std::path::PathBuf {
    dir.join(format!("{}.manifest.json", role.as_str()))
}

/// Writes `<role>.params.bin` and `<role>.manifest.json` into `dir`.
pub fn save_network(handle: &NetworkHandle, dir: &Path, rng_state: Option<serde_json::Value>) -> Result<NetworkManifest> {
    let entries = entries_of(handle);
    let bytes = encode_archive(&entries);
    let manifest = NetworkManifest {
        role: handle.role,
        config: handle.config.clone(),
        shapes: entries.iter().map(|e| (e.name.clone(), e.shape.clone())).collect(),
        rng_state,
        sha256: hex::encode(Sha256::digest(&bytes)),
    };
    let path = archive_path(dir, handle.role);
    std::fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
    let mpath = manifest_path(dir, handle.role);
    std::fs::write(&mpath, serde_json::to_vec_pretty(&manifest)?).map_err(|e| Error::io(&mpath, e))?;
    Ok(manifest)
}

/// Rebuilds the network from its manifest and fills it from the archive;
/// every name and shape must match exactly.
pub fn load_network(dir: &Path, role: Role) -> Result<(NetworkHandle, NetworkManifest)> {
    let mpath = manifest_path(dir, role);
    let text = std::fs::read(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let manifest: NetworkManifest = serde_json::from_slice(&text)?;
    if manifest.role != role {
        return Err(Error::Invalid(format!("{} holds role {:?}, expected {:?}", mpath.display(), manifest.role, role)));
    }
    let path = archive_path(dir, role);
    let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let mut handle = build(&manifest.config, role)?;
    let mut stored: BTreeMap<String, ArchiveEntry> =
        decode_archive(&bytes)?.into_iter().map(|e| (e.name.clone(), e)).collect();
    let expected = entries_of(&handle);
    if stored.len() != expected.len() {
        return Err(Error::shape(format!("{} entries", path.display()), expected.len(), stored.len()));
    }
    for e in &expected {
        let s = stored
            .get(&e.name)
            .ok_or_else(|| Error::Invalid(format!("{} lacks tensor {}", path.display(), e.name)))?;
        if s.shape != e.shape || manifest.shapes.get(&e.name) != Some(&e.shape) {
            return Err(Error::shape(e.name.clone(), format!("{:?}", e.shape), format!("{:?}", s.shape)));
        }
    }
    for p in handle.net.params_mut() {
        p.value = stored.remove(&p.name).expect("checked above").data;
    }
    for b in handle.net.buffers_mut() {
        b.value = stored.remove(&b.name).expect("checked above").data;
    }
    Ok((handle, manifest))
}
