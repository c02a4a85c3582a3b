//! Binary container for named f32 tensors plus a JSON header.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic        4 bytes  "CRKS"
//! version      u32
//! header_len   u32, then header_len bytes of UTF-8 JSON
//! n_tensors    u32
//! per tensor:  name_len u32, name bytes, ndim u32, ndim x u32 dims, prod(dims) x f32
//! sha256       32 bytes over everything above
//! ```

use std::path::Path;

use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"CRKS";
const DIGEST_LEN: usize = 32;

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Container {
    pub header: Value,
    pub tensors: Vec<NamedTensor>,
}

impl Container {
    pub fn get(&self, name: &str) -> Option<&NamedTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn encode(&self) -> Vec<u8> {
        encode_with_version(self, FORMAT_VERSION)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 || &bytes[..4] != MAGIC {
            return Err(Error::CorruptWeights("bad magic".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(Error::VersionMismatch {
                found: version,
                expected: FORMAT_VERSION,
            });
        }
        if bytes.len() < 8 + DIGEST_LEN {
            return Err(Error::CorruptWeights("file truncated".into()));
        }
        let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
        if Sha256::digest(body).as_slice() != digest {
            return Err(Error::CorruptWeights("checksum mismatch (truncated or modified file)".into()));
        }
        let mut r = Reader { buf: body, pos: 8 };
        let hlen = r.u32()? as usize;
        let header: Value =
            serde_json::from_slice(r.take(hlen)?).map_err(|e| Error::CorruptWeights(format!("header: {e}")))?;
        let n = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(n.min(1 << 16));
        for _ in 0..n {
            let nlen = r.u32()? as usize;
            let name = String::from_utf8(r.take(nlen)?.to_vec())
                .map_err(|_| Error::CorruptWeights("tensor name is not UTF-8".into()))?;
            let ndim = r.u32()? as usize;
            let shape = (0..ndim).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let count: usize = shape.iter().product();
            let raw = r.take(count.checked_mul(4).ok_or_else(|| Error::CorruptWeights("tensor too large".into()))?)?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            tensors.push(NamedTensor { name, shape, data });
        }
        if r.pos != body.len() {
            return Err(Error::CorruptWeights("trailing bytes after tensor table".into()));
        }
        Ok(Container { header, tensors })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }
}

/// Encodes under an arbitrary version number; only useful for compatibility tests.
pub fn encode_with_version(c: &Container, version: u32) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&version.to_le_bytes());
    let header = c.header.to_string();
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    out.extend_from_slice(&(c.tensors.len() as u32).to_le_bytes());
    for t in &c.tensors {
        out.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
        out.extend_from_slice(t.name.as_bytes());
        out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
        for &d in &t.shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in &t.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(digest.as_slice());
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::CorruptWeights("unexpected end of data".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

/// Hex SHA-256 over (name, shape, little-endian data) of each tensor in order.
pub fn digest_tensors<'a>(tensors: impl IntoIterator<Item = (&'a str, &'a [usize], &'a [f32])>) -> String {
    let mut h = Sha256::new();
    for (name, shape, data) in tensors {
        h.update((name.len() as u64).to_le_bytes());
        h.update(name.as_bytes());
        for &d in shape {
            h.update((d as u64).to_le_bytes());
        }
        for v in data {
            h.update(v.to_le_bytes());
        }
    }
    hex(h.finalize().as_slice())
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Hex SHA-256 of a file's bytes.
pub fn file_digest(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex(Sha256::digest(&bytes).as_slice()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Container {
        Container {
            header: serde_json::json!({"kind": "test", "stage_channels": [1, 2]}),
            tensors: vec![
                NamedTensor {
                    name: "a.weight".into(),
                    shape: vec![2, 3],
                    data: vec![1.0, -2.0, 3.5, f32::MIN_POSITIVE, 0.0, -0.0],
                },
                NamedTensor {
                    name: "b".into(),
                    shape: vec![0],
                    data: vec![],
                },
            ],
        }
    }

    #[test]
    fn round_trip_is_bitwise() {
        let c = sample();
        let back = Container::decode(&c.encode()).unwrap();
        assert_eq!(back.header, c.header);
        for (x, y) in back.tensors.iter().zip(&c.tensors) {
            assert_eq!(x.name, y.name);
            assert_eq!(x.shape, y.shape);
            let bx: Vec<u32> = x.data.iter().map(|v| v.to_bits()).collect();
            let by: Vec<u32> = y.data.iter().map(|v| v.to_bits()).collect();
            assert_eq!(bx, by);
        }
    }

    #[test]
    fn bumped_version_is_rejected() {
        let bytes = encode_with_version(&sample(), FORMAT_VERSION + 1);
        assert!(matches!(
            Container::decode(&bytes),
            Err(Error::VersionMismatch { found, .. }) if found == FORMAT_VERSION + 1
        ));
    }

    #[test]
    fn truncation_and_corruption_are_rejected() {
        let bytes = sample().encode();
        for cut in [0, 5, 12, bytes.len() / 2, bytes.len() - 1] {
            assert!(matches!(Container::decode(&bytes[..cut]), Err(Error::CorruptWeights(_))), "cut {cut}");
        }
        let mut flipped = bytes.clone();
        flipped[20] ^= 1;
        assert!(matches!(Container::decode(&flipped), Err(Error::CorruptWeights(_))));
    }
}
