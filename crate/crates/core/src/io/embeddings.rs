//! `EMB1` embedding files: a fixed header, a little-endian `f32` payload and
//! an optional row-id table.

use std::collections::BTreeSet;
use std::path::Path;

use crate::encoders::ByteReader;
use crate::error::{Error, Result};
use crate::numerics::{l2_normalize_rows, Matrix};

pub const EMB_MAGIC: &[u8; 4] = b"EMB1";
pub const EMB_VERSION: u32 = 1;

/// In-memory image of an embedding file. The payload stays in 32-bit form
/// so that a load/save round trip is bit-exact.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingFile {
    pub rows: usize,
    pub cols: usize,
    pub payload: Vec<f32>,
    pub ids: Option<Vec<String>>,
}

impl EmbeddingFile {
    /// Narrows `m` to 32-bit storage.
    pub fn from_matrix(m: &Matrix, ids: Option<Vec<String>>) -> Result<Self> {
        if !m.is_finite() {
            return Err(Error::NonFinite("embedding matrix".into()));
        }
        let f = Self {
            rows: m.rows(),
            cols: m.cols(),
            payload: m.data().iter().map(|&v| v as f32).collect(),
            ids,
        };
        f.check_ids()?;
        Ok(f)
    }

    /// Widens to 64-bit; `normalize` rescales every row to unit norm.
    pub fn to_matrix(&self, normalize: bool) -> Result<Matrix> {
        let m = Matrix::new(self.rows, self.cols, self.payload.iter().map(|&v| f64::from(v)).collect())?;
        if normalize {
            l2_normalize_rows(&m)
        } else {
            Ok(m)
        }
    }

    fn check_ids(&self) -> Result<()> {
        if let Some(ids) = &self.ids {
            if ids.len() != self.rows {
                return Err(Error::ShapeMismatch(format!("{} ids for {} rows", ids.len(), self.rows)));
            }
            let mut seen = BTreeSet::new();
            if let Some(dup) = ids.iter().find(|id| !seen.insert(id.as_str())) {
                return Err(Error::DuplicateEntry(format!("embedding id {dup:?}")));
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(20 + 4 * self.payload.len());
        out.extend_from_slice(EMB_MAGIC);
        out.extend_from_slice(&EMB_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.rows as u32).to_le_bytes());
        out.extend_from_slice(&(self.cols as u32).to_le_bytes());
        for v in &self.payload {
            out.extend_from_slice(&v.to_le_bytes());
        }
        let ids = self.ids.as_deref().unwrap_or_default();
        out.extend_from_slice(&(ids.len() as u32).to_le_bytes());
        for id in ids {
            out.extend_from_slice(&(id.len() as u32).to_le_bytes());
            out.extend_from_slice(id.as_bytes());
        }
        out
    }

    /// A file that ends right after the payload carries no ids.
    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = ByteReader { bytes, pos: 0, path };
        if r.take(4).ok() != Some(EMB_MAGIC.as_slice()) {
            return Err(Error::BadMagic {
                path: path.to_owned(),
                expected: "EMB1",
            });
        }
        let version = r.u32()?;
        if version != EMB_VERSION {
            return Err(Error::Config(format!("unsupported embedding file version {version}")));
        }
        let rows = r.u32()? as usize;
        let cols = r.u32()? as usize;
        let len = rows
            .checked_mul(cols)
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| Error::TruncatedFile(path.to_owned()))?;
        let payload = r
            .take(len)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4-byte chunk")))
            .collect();
        let mut ids = None;
        if r.pos < bytes.len() {
            let n = r.u32()? as usize;
            if n > 0 {
                let mut v = Vec::with_capacity(n.min(rows));
                for _ in 0..n {
                    let l = r.u32()? as usize;
                    let s = std::str::from_utf8(r.take(l)?)
                        .map_err(|_| Error::Config(format!("{}: row id is not UTF-8", path.display())))?;
                    v.push(s.to_owned());
                }
                ids = Some(v);
            }
        }
        let f = Self { rows, cols, payload, ids };
        f.check_ids()?;
        Ok(f)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

/// Loads a matrix and its row ids.
pub fn load_embeddings(path: &Path, normalize_on_load: bool) -> Result<(Matrix, Option<Vec<String>>)> {
    let f = EmbeddingFile::load(path)?;
    let m = f.to_matrix(normalize_on_load)?;
    Ok((m, f.ids))
}

pub fn save_embeddings(m: &Matrix, ids: Option<Vec<String>>, path: &Path) -> Result<()> {
    EmbeddingFile::from_matrix(m, ids)?.save(path)
}

/// Image-view ids are `<pair id>#<view>`; anything else names the pair itself.
pub fn pair_of(id: &str) -> &str {
    id.rsplit_once('#').map_or(id, |(p, _)| p)
}

pub fn view_id(pair: &str, view: usize) -> String {
    format!("{pair}#{view}")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;

    fn random(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut rng = Rng::new(seed);
        Matrix::from_fn(rows, cols, |_, _| rng.normal())
    }

    #[test]
    fn round_trip_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.emb");
        let f = EmbeddingFile::from_matrix(&random(4, 8, 1), Some((0..4).map(|i| format!("r{i}")).collect())).unwrap();
        f.save(&p).unwrap();
        let back = EmbeddingFile::load(&p).unwrap();
        assert_eq!(back, f);
        let bits = |f: &EmbeddingFile| f.payload.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&back), bits(&f));
        back.save(&p).unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), f.to_bytes());
    }

    #[test]
    fn load_normalizes_by_default_flag() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.emb");
        save_embeddings(&random(3, 5, 2), None, &p).unwrap();
        let (m, ids) = load_embeddings(&p, true).unwrap();
        assert!(ids.is_none());
        assert!(m.row_norms().iter().all(|n| (n - 1.0).abs() < 1e-12));
        let (raw, _) = load_embeddings(&p, false).unwrap();
        assert!(raw.row_norms().iter().any(|n| (n - 1.0).abs() > 1e-3));
    }

    #[test]
    fn malformed_files() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.emb");
        let bytes = EmbeddingFile::from_matrix(&random(4, 8, 3), None).unwrap().to_bytes();
        std::fs::write(&p, &bytes[..40]).unwrap();
        assert!(matches!(EmbeddingFile::load(&p), Err(Error::TruncatedFile(_))));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        std::fs::write(&p, bad).unwrap();
        assert!(matches!(EmbeddingFile::load(&p), Err(Error::BadMagic { .. })));
        save_embeddings(&Matrix::zeros(2, 3), None, &p).unwrap();
        assert!(matches!(load_embeddings(&p, true), Err(Error::ZeroRow { .. })));
        let dup = EmbeddingFile::from_matrix(&random(2, 2, 4), Some(vec!["a".into(), "a".into()]));
        assert!(matches!(dup, Err(Error::DuplicateEntry(_))));
    }

    #[test]
    fn view_ids() {
        assert_eq!(pair_of(&view_id("plot#7", 1)), "plot#7");
        assert_eq!(pair_of("plain"), "plain");
    }
}
