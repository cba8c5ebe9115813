//! Bit-exact checkpoint container.
//!
//! Layout: magic "LMK1", little-endian u32 array count, then per array:
//! u16 name length, UTF-8 name, u8 dtype code (0 = f32, 1 = f64), u8 rank,
//! u32 dims[rank], row-major payload. A trailing u32 CRC-32 covers all
//! preceding bytes.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::autodiff::NDArray;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"LMK1";

/// Payload precision. Model weights are stored as f32; exact metadata
/// (geometry, scales) as f64.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    fn code(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::F64 => 1,
        }
    }

    fn from_code(c: u8) -> Result<Self> {
        match c {
            0 => Ok(DType::F32),
            1 => Ok(DType::F64),
            other => Err(Error::format(format!("unknown dtype code {other}"))),
        }
    }
}

/// One named array scheduled for serialization.
#[derive(Debug, Clone)]
pub struct Entry {
    pub name: String,
    pub dtype: DType,
    pub array: NDArray,
}

impl Entry {
    pub fn f32(name: impl Into<String>, array: NDArray) -> Self {
        Entry { name: name.into(), dtype: DType::F32, array }
    }

    pub fn f64(name: impl Into<String>, array: NDArray) -> Self {
        Entry { name: name.into(), dtype: DType::F64, array }
    }
}

/// Serialize entries in the given order.
pub fn to_bytes(entries: &[Entry]) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&u32::try_from(entries.len()).unwrap().to_le_bytes());
    for e in entries {
        let name = e.name.as_bytes();
        if name.len() > usize::from(u16::MAX) {
            return Err(Error::contract(format!("array name too long: {}", e.name)));
        }
        buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
        buf.extend_from_slice(name);
        buf.push(e.dtype.code());
        let shape = e.array.shape();
        if shape.len() > usize::from(u8::MAX) {
            return Err(Error::contract(format!("rank {} too high for {}", shape.len(), e.name)));
        }
        buf.push(shape.len() as u8);
        for &d in shape {
            buf.extend_from_slice(&u32::try_from(d).unwrap().to_le_bytes());
        }
        match e.dtype {
            DType::F32 => {
                for &v in e.array.data() {
                    buf.extend_from_slice(&(v as f32).to_le_bytes());
                }
            }
            DType::F64 => {
                for &v in e.array.data() {
                    buf.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
    }
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    Ok(buf)
}

pub fn save(path: impl AsRef<Path>, entries: &[Entry]) -> Result<()> {
    let path = path.as_ref();
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let bytes = to_bytes(entries)?;
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

/// Parse a container; f32 payloads are widened to f64 in memory while the
/// recorded dtype is preserved for faithful re-serialization.
pub fn from_bytes(bytes: &[u8]) -> Result<Vec<Entry>> {
    if bytes.len() < 8 {
        return Err(Error::format("checkpoint shorter than header".to_string()));
    }
    if &bytes[0..4] != MAGIC {
        return Err(Error::format(format!(
            "bad magic {:02x?}, expected {MAGIC:02x?}",
            &bytes[0..4]
        )));
    }
    let body = &bytes[..bytes.len() - 4];
    let stored_crc = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().unwrap());
    let crc = crc32fast::hash(body);
    if crc != stored_crc {
        return Err(Error::format(format!(
            "CRC mismatch: computed {crc:08x}, stored {stored_crc:08x}"
        )));
    }

    let mut pos = 4usize;
    let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
        if *pos + n > body.len() {
            return Err(Error::format("truncated checkpoint".to_string()));
        }
        let s = &body[*pos..*pos + n];
        *pos += n;
        Ok(s)
    };

    let count = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = u16::from_le_bytes(take(&mut pos, 2)?.try_into().unwrap()) as usize;
        let name = String::from_utf8(take(&mut pos, name_len)?.to_vec())
            .map_err(|_| Error::format("array name is not UTF-8".to_string()))?;
        let dtype = DType::from_code(take(&mut pos, 1)?[0])?;
        let rank = take(&mut pos, 1)?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize);
        }
        let n: usize = shape.iter().product();
        let data = match dtype {
            DType::F32 => {
                let raw = take(&mut pos, n * 4)?;
                raw.chunks_exact(4)
                    .map(|c| f64::from(f32::from_le_bytes(c.try_into().unwrap())))
                    .collect()
            }
            DType::F64 => {
                let raw = take(&mut pos, n * 8)?;
                raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect()
            }
        };
        entries.push(Entry { name, dtype, array: NDArray::new(shape, data) });
    }
    if pos != body.len() {
        return Err(Error::format(format!(
            "{} trailing bytes after the last array",
            body.len() - pos
        )));
    }
    Ok(entries)
}

pub fn load(path: impl AsRef<Path>) -> Result<Vec<Entry>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path)
        .map_err(|e| Error::format(format!("{}: {e}", path.display())))?;
    from_bytes(&bytes).map_err(|e| Error::format(format!("{}: {e}", path.display())))
}

/// Entries keyed by name for structured loading.
pub fn load_map(path: impl AsRef<Path>) -> Result<BTreeMap<String, Entry>> {
    Ok(load(path)?.into_iter().map(|e| (e.name.clone(), e)).collect())
}

/// SHA-256 of the file bytes, hex-encoded. This is the frozen-weights digest.
pub fn digest_file(path: impl AsRef<Path>) -> Result<String> {
    let bytes = std::fs::read(path.as_ref())?;
    Ok(digest_bytes(&bytes))
}

pub fn digest_bytes(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    let out = h.finalize();
    out.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_entries() -> Vec<Entry> {
        vec![
            Entry::f32("layer.w", NDArray::new(vec![2, 3], vec![0.5, -1.0, 2.0, 0.25, 0.125, -4.0])),
            Entry::f64("meta.scale", NDArray::new(vec![1], vec![24.0])),
            Entry::f32("vocab.0.tonal", NDArray::new(vec![0], vec![])),
        ]
    }

    #[test]
    fn round_trip_preserves_everything() {
        let entries = sample_entries();
        let bytes = to_bytes(&entries).unwrap();
        let back = from_bytes(&bytes).unwrap();
        assert_eq!(back.len(), entries.len());
        for (a, b) in entries.iter().zip(back.iter()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.dtype, b.dtype);
            assert_eq!(a.array.shape(), b.array.shape());
            assert_eq!(a.array.data(), b.array.data());
        }
        // and re-serialization is byte-identical
        let bytes2 = to_bytes(&back).unwrap();
        assert_eq!(bytes, bytes2);
    }

    #[test]
    fn corrupted_byte_fails_crc() {
        let mut bytes = to_bytes(&sample_entries()).unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x40;
        match from_bytes(&bytes) {
            Err(Error::Format(msg)) => assert!(msg.contains("CRC"), "{msg}"),
            other => panic!("expected CRC failure, got {other:?}"),
        }
    }

    #[test]
    fn bad_magic_is_rejected() {
        let mut bytes = to_bytes(&sample_entries()).unwrap();
        bytes[0] = b'X';
        assert!(matches!(from_bytes(&bytes), Err(Error::Format(_))));
    }

    #[test]
    fn digest_is_stable() {
        let bytes = to_bytes(&sample_entries()).unwrap();
        assert_eq!(digest_bytes(&bytes), digest_bytes(&bytes));
    }
}
