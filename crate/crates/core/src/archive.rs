//! Named-tensor archive.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic  "AFDN"
//! u32    format version
//! u32    tensor count
//! per tensor:
//!   u16  name length, then the UTF-8 name
//!   u8   rank, then `rank` x u32 dimensions
//!   f64  values, row-major
//! ```

use std::fs;
use std::io::{self, Write};
use std::path::Path;

use thiserror::Error;

use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"AFDN";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ArchiveError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("bad magic bytes {0:?}")]
    BadMagic(Vec<u8>),
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),
    #[error("archive truncated while reading {0}")]
    Truncated(String),
    #[error("tensor {name}: {msg}")]
    Invalid { name: String, msg: String },
    #[error("trailing bytes after last tensor")]
    TrailingBytes,
    #[error("duplicate tensor name {0}")]
    Duplicate(String),
}

pub fn encode(tensors: &[(String, Tensor)]) -> Result<Vec<u8>, ArchiveError> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        let invalid = |msg: &str| ArchiveError::Invalid { name: name.clone(), msg: msg.into() };
        let len = u16::try_from(name.len()).map_err(|_| invalid("name longer than 65535 bytes"))?;
        let rank = u8::try_from(t.rank()).map_err(|_| invalid("rank above 255"))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(rank);
        for &d in t.shape() {
            let d = u32::try_from(d).map_err(|_| invalid("dimension above u32::MAX"))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &dyn Fn() -> String) -> Result<&'a [u8], ArchiveError> {
        if self.bytes.len() - self.pos < n {
            return Err(ArchiveError::Truncated(what()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &dyn Fn() -> String) -> Result<u32, ArchiveError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

/// Parses a whole archive; nothing is returned unless every tensor decodes.
pub fn decode(bytes: &[u8]) -> Result<Vec<(String, Tensor)>, ArchiveError> {
    let mut r = Reader { bytes, pos: 0 };
    let header = || "header".to_string();
    let magic = r.take(4, &header)?;
    if magic != MAGIC {
        return Err(ArchiveError::BadMagic(magic.to_vec()));
    }
    let version = r.u32(&header)?;
    if version != FORMAT_VERSION {
        return Err(ArchiveError::UnsupportedVersion(version));
    }
    let count = r.u32(&header)? as usize;
    let mut out: Vec<(String, Tensor)> = Vec::with_capacity(count.min(1 << 16));
    for index in 0..count {
        let unnamed = || format!("name of tensor #{index}");
        let len = u16::from_le_bytes(r.take(2, &unnamed)?.try_into().unwrap()) as usize;
        let name = std::str::from_utf8(r.take(len, &unnamed)?)
            .map_err(|_| ArchiveError::Invalid { name: format!("#{index}"), msg: "name is not UTF-8".into() })?
            .to_string();
        let named = || format!("tensor {name}");
        let rank = r.take(1, &named)?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32(&named)? as usize);
        }
        let numel = shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d));
        let Some(numel) = numel.filter(|&n| n > 0 && rank > 0) else {
            return Err(ArchiveError::Invalid { name, msg: format!("invalid shape {shape:?}") });
        };
        let byte_len = numel.checked_mul(8).ok_or_else(|| ArchiveError::Truncated(named()))?;
        let raw = r.take(byte_len, &named)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if out.iter().any(|(n, _)| *n == name) {
            return Err(ArchiveError::Duplicate(name));
        }
        let t = Tensor::new(shape, data).map_err(|e| ArchiveError::Invalid { name: name.clone(), msg: e.to_string() })?;
        out.push((name, t));
    }
    if r.pos != bytes.len() {
        return Err(ArchiveError::TrailingBytes);
    }
    Ok(out)
}

/// Writes through a temporary sibling file and renames it into place.
pub fn save(path: &Path, tensors: &[(String, Tensor)]) -> Result<(), ArchiveError> {
    let bytes = encode(tensors)?;
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Vec<(String, Tensor)>, ArchiveError> {
    decode(&fs::read(path)?)
}
