//! The named tensor archive.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! b"JTRK" | version: u32 | entry count: u32
//! per entry:
//!   name length: u16 | name: UTF-8 bytes
//!   dtype: u8 (0 = f32, 1 = f64) | rank: u8 | rank x u64 dims
//!   payload: product(dims) little-endian scalars
//! ```

use std::io::Write;
use std::path::Path;

pub use crate::error::ArchiveError;
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"JTRK";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32 = 0,
    F64 = 1,
}

impl Dtype {
    fn from_tag(tag: u8) -> Result<Self, ArchiveError> {
        match tag {
            0 => Ok(Dtype::F32),
            1 => Ok(Dtype::F64),
            t => Err(ArchiveError::Dtype(t)),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub name: String,
    pub dtype: Dtype,
    pub tensor: Tensor,
}

/// An ordered list of named tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Archive {
    pub entries: Vec<Entry>,
}

impl Archive {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor, dtype: Dtype) {
        self.entries.push(Entry {
            name: name.into(),
            dtype,
            tensor,
        });
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries
            .iter()
            .find(|e| e.name == name)
            .map(|e| &e.tensor)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor, ArchiveError> {
        self.get(name)
            .ok_or_else(|| ArchiveError::Missing(name.to_string()))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.name.as_str())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, ArchiveError> {
        let mut out = Vec::new();
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for e in &self.entries {
            let name = e.name.as_bytes();
            let len: u16 = name
                .len()
                .try_into()
                .map_err(|_| ArchiveError::NameTooLong(e.name.clone()))?;
            out.extend_from_slice(&len.to_le_bytes());
            out.extend_from_slice(name);
            out.push(e.dtype as u8);
            out.push(e.tensor.rank() as u8);
            for &d in e.tensor.dims() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            match e.dtype {
                Dtype::F32 => {
                    for &x in e.tensor.data() {
                        out.extend_from_slice(&(x as f32).to_le_bytes());
                    }
                }
                Dtype::F64 => {
                    for &x in e.tensor.data() {
                        out.extend_from_slice(&x.to_le_bytes());
                    }
                }
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ArchiveError> {
        let mut r = Reader { bytes, pos: 0 };
        let magic: [u8; 4] = r.take(4)?.try_into().unwrap();
        if magic != MAGIC {
            return Err(ArchiveError::BadMagic(magic));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(ArchiveError::Version(version));
        }
        let count = r.u32()? as usize;
        let mut entries = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let len = u16::from_le_bytes(r.take(2)?.try_into().unwrap()) as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| ArchiveError::Name)?
                .to_string();
            let dtype = Dtype::from_tag(r.take(1)?[0])?;
            let rank = r.take(1)?[0] as usize;
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                dims.push(u64::from_le_bytes(r.take(8)?.try_into().unwrap()) as usize);
            }
            let n: usize = dims.iter().product();
            let data: Vec<f64> = match dtype {
                Dtype::F32 => r
                    .take(n.checked_mul(4).ok_or(ArchiveError::Truncated)?)?
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                    .collect(),
                Dtype::F64 => r
                    .take(n.checked_mul(8).ok_or(ArchiveError::Truncated)?)?
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            };
            let tensor = Tensor::new(&dims, data).map_err(|source| ArchiveError::Shape {
                name: name.clone(),
                source,
            })?;
            entries.push(Entry {
                name,
                dtype,
                tensor,
            });
        }
        Ok(Self { entries })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<(), ArchiveError> {
        let bytes = self.to_bytes()?;
        let mut f = std::fs::File::create(path)?;
        f.write_all(&bytes)?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self, ArchiveError> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ArchiveError> {
        let end = self.pos.checked_add(n).ok_or(ArchiveError::Truncated)?;
        if end > self.bytes.len() {
            return Err(ArchiveError::Truncated);
        }
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, ArchiveError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Archive {
        let mut a = Archive::new();
        a.push("w", Tensor::from_vec(&[2, 3], vec![0.5, -1.25, 3.0, 1e-7, 2.0, 7.0]), Dtype::F32);
        a.push("λ", Tensor::scalar(std::f64::consts::PI), Dtype::F64);
        a.push("grid", Tensor::zeros(&[2, 1, 2, 2]), Dtype::F32);
        a
    }

    #[test]
    fn header_layout() {
        let bytes = sample().to_bytes().unwrap();
        assert_eq!(&bytes[0..4], b"JTRK");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 3);
        // first entry: name length 1, "w", dtype 0, rank 2
        assert_eq!(u16::from_le_bytes(bytes[12..14].try_into().unwrap()), 1);
        assert_eq!(bytes[14], b'w');
        assert_eq!(bytes[15], 0);
        assert_eq!(bytes[16], 2);
        assert_eq!(u64::from_le_bytes(bytes[17..25].try_into().unwrap()), 2);
    }

    #[test]
    fn bytes_round_trip_exactly() {
        let bytes = sample().to_bytes().unwrap();
        let back = Archive::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes().unwrap(), bytes);
        assert_eq!(back.get("λ").unwrap().item(), std::f64::consts::PI);
    }

    #[test]
    fn rejects_corruption() {
        let mut bytes = sample().to_bytes().unwrap();
        assert!(matches!(
            Archive::from_bytes(&bytes[..bytes.len() - 1]),
            Err(ArchiveError::Truncated)
        ));
        bytes[0] = b'X';
        assert!(matches!(Archive::from_bytes(&bytes), Err(ArchiveError::BadMagic(_))));
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.jtrk");
        sample().write(&p).unwrap();
        let back = Archive::read(&p).unwrap();
        assert_eq!(back.to_bytes().unwrap(), sample().to_bytes().unwrap());
    }
}
