//! `CKPT` parameter container.
//!
//! Layout, all integers and floats little-endian:
//!
//! ```text
//! magic    4 bytes  "CKPT"
//! version  u32      1
//! blocks   u32      number of parameter blocks
//! per block:
//!   name_len u32, name (UTF-8, name_len bytes)
//!   ndims    u32, dims (u32 × ndims)
//!   payload  f64 × product(dims)
//! ```

use std::path::Path;

use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"CKPT";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct ParamBlock {
    pub name: String,
    pub dims: Vec<usize>,
    pub values: Vec<f64>,
}

/// Ordered collection of named parameter blocks.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    blocks: Vec<ParamBlock>,
}

impl Checkpoint {
    pub fn push(&mut self, block: ParamBlock) {
        self.blocks.retain(|b| b.name != block.name);
        self.blocks.push(block);
    }

    pub fn extend(&mut self, other: Checkpoint) {
        for b in other.blocks {
            self.push(b);
        }
    }

    pub fn get(&self, name: &str) -> Option<&ParamBlock> {
        self.blocks.iter().find(|b| b.name == name)
    }

    pub fn blocks(&self) -> &[ParamBlock] {
        &self.blocks
    }

    /// Renames every block starting with `from` to start with `to`,
    /// dropping blocks outside that prefix.
    pub fn reprefix(&self, from: &str, to: &str) -> Checkpoint {
        Checkpoint {
            blocks: self
                .blocks
                .iter()
                .filter_map(|b| {
                    b.name.strip_prefix(from).map(|rest| ParamBlock {
                        name: format!("{to}{rest}"),
                        dims: b.dims.clone(),
                        values: b.values.clone(),
                    })
                })
                .collect(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.blocks.len() as u32).to_le_bytes());
        for b in &self.blocks {
            out.extend_from_slice(&(b.name.len() as u32).to_le_bytes());
            out.extend_from_slice(b.name.as_bytes());
            out.extend_from_slice(&(b.dims.len() as u32).to_le_bytes());
            for &d in &b.dims {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in &b.values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0, path };
        if r.take(4)? != MAGIC {
            return Err(Error::BadMagic {
                path: path.to_owned(),
                expected: "CKPT",
            });
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Config(format!("unsupported checkpoint version {version}")));
        }
        let n = r.u32()? as usize;
        let mut blocks = Vec::with_capacity(n.min(1024));
        for _ in 0..n {
            let len = r.u32()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec())
                .map_err(|_| Error::Config("checkpoint block name is not UTF-8".into()))?;
            let ndims = r.u32()? as usize;
            let dims = (0..ndims).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let count: usize = dims.iter().product();
            let raw = r.take(count.checked_mul(8).ok_or_else(|| Error::TruncatedFile(path.to_owned()))?)?;
            let values = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            blocks.push(ParamBlock { name, dims, values });
        }
        Ok(Self { blocks })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

pub(crate) struct Reader<'a> {
    pub(crate) bytes: &'a [u8],
    pub(crate) pos: usize,
    pub(crate) path: &'a Path,
}

impl<'a> Reader<'a> {
    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::TruncatedFile(self.path.to_owned())),
        }
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut c = Checkpoint::default();
        c.push(ParamBlock {
            name: "img.adapter.weight".into(),
            dims: vec![2, 2],
            values: vec![1.0, -0.0, 1e-300, f64::MAX],
        });
        c.push(ParamBlock {
            name: "tau".into(),
            dims: vec![1],
            values: vec![std::f64::consts::LN_10],
        });
        c
    }

    #[test]
    fn round_trip_is_exact() {
        let c = sample();
        let back = Checkpoint::from_bytes(&c.to_bytes(), Path::new("mem")).unwrap();
        assert_eq!(back, c);
        assert_eq!(&c.to_bytes()[..4], b"CKPT");
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        let mut bytes = sample().to_bytes();
        let p = Path::new("mem");
        assert!(matches!(
            Checkpoint::from_bytes(&bytes[..bytes.len() - 3], p),
            Err(Error::TruncatedFile(_))
        ));
        bytes[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bytes, p), Err(Error::BadMagic { .. })));
    }

    #[test]
    fn reprefix_filters_and_renames() {
        let c = sample().reprefix("img.", "image.");
        assert_eq!(c.blocks().len(), 1);
        assert!(c.get("image.adapter.weight").is_some());
    }
}
