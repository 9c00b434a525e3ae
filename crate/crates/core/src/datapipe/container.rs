//! Binary dataset container.
//!
//! Little-endian layout:
//!
//! ```text
//! "HARW" | version u32 | n u64 | n_c u32 | n_w u32 | n_a u32 | subject_count u32
//! X  f32 × n·n_c·n_w   (row-major, window by window)
//! Y  i32 × n
//! S  i32 × n
//! subject ids  i32 × subject_count
//! SHA-256 of all preceding bytes (32 bytes)
//! ```

use std::path::Path;

use sha2::{Digest, Sha256};

use super::WindowedDataset;
use crate::error::{Error, Result};

pub const CONTAINER_MAGIC: &[u8; 4] = b"HARW";
pub const CONTAINER_VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 8 + 4 * 4;
const DIGEST_LEN: usize = 32;

pub fn encode_container(ds: &WindowedDataset) -> Result<Vec<u8>> {
    ds.validate()?;
    let mut buf = Vec::with_capacity(HEADER_LEN + ds.x.len() * 4 + ds.len() * 8 + DIGEST_LEN);
    buf.extend_from_slice(CONTAINER_MAGIC);
    buf.extend_from_slice(&CONTAINER_VERSION.to_le_bytes());
    buf.extend_from_slice(&(ds.len() as u64).to_le_bytes());
    for v in [ds.n_c, ds.n_w, ds.n_a, ds.subject_ids.len()] {
        buf.extend_from_slice(&u32::try_from(v).map_err(|_| Error::Invalid(format!("{v} overflows u32")))?.to_le_bytes());
    }
    for v in &ds.x {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for &y in &ds.y {
        buf.extend_from_slice(&(y as i32).to_le_bytes());
    }
    for ids in [&ds.s, &ds.subject_ids] {
        for v in ids {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(digest.as_slice());
    Ok(buf)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Invalid(format!("container truncated at byte {}", self.pos))
        })?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn i32s(&mut self, n: usize) -> Result<Vec<i32>> {
        Ok(self
            .take(n.checked_mul(4).ok_or_else(|| Error::Invalid("container size overflow".into()))?)?
            .chunks_exact(4)
            .map(|c| i32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

pub fn decode_container(bytes: &[u8]) -> Result<WindowedDataset> {
    if bytes.len() < HEADER_LEN + DIGEST_LEN || &bytes[..4] != CONTAINER_MAGIC {
        return Err(Error::Invalid("not a HARW container".into()));
    }
    let (body, stored) = bytes.split_at(bytes.len() - DIGEST_LEN);
    let digest = Sha256::digest(body);
    if digest.as_slice() != stored {
        return Err(Error::Checksum {
            expected: hex::encode(stored),
            found: hex::encode(digest.as_slice()),
        });
    }
    let mut r = Reader { bytes: body, pos: 4 };
    let version = r.u32()?;
    if version != CONTAINER_VERSION {
        return Err(Error::Invalid(format!("unsupported container version {version}")));
    }
    let n = r.u64()? as usize;
    let n_c = r.u32()? as usize;
    let n_w = r.u32()? as usize;
    let n_a = r.u32()? as usize;
    let subject_count = r.u32()? as usize;
    let x_len = n
        .checked_mul(n_c)
        .and_then(|v| v.checked_mul(n_w))
        .and_then(|v| v.checked_mul(4))
        .ok_or_else(|| Error::Invalid("container size overflow".into()))?;
    let x = r
        .take(x_len)?
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let y = r
        .i32s(n)?
        .into_iter()
        .map(|v| usize::try_from(v).map_err(|_| Error::Invalid(format!("negative activity label {v}"))))
        .collect::<Result<Vec<_>>>()?;
    let s = r.i32s(n)?;
    let subject_ids = r.i32s(subject_count)?;
    if r.pos != body.len() {
        return Err(Error::Invalid(format!("{} trailing bytes in container", body.len() - r.pos)));
    }
    let ds = WindowedDataset {
        x,
        y,
        s,
        n_c,
        n_w,
        n_a,
        subject_ids,
    };
    ds.validate()?;
    Ok(ds)
}

pub fn write_container(ds: &WindowedDataset, path: &Path) -> Result<()> {
    let bytes = encode_container(ds)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_container(path: &Path) -> Result<WindowedDataset> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_container(&bytes)
}
