//! Grid-cell blocking, fold assignment and buffered train/validation splits.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Rng;

pub const DEFAULT_CELL_SIZE: f64 = 5000.0;
pub const DEFAULT_FOLDS: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CellId {
    pub ix: i64,
    pub iy: i64,
}

impl CellId {
    pub fn chebyshev(&self, other: &CellId) -> u64 {
        self.ix.abs_diff(other.ix).max(self.iy.abs_diff(other.iy))
    }

    fn neighbourhood(&self) -> impl Iterator<Item = CellId> + '_ {
        (-1..=1).flat_map(move |dx| {
            (-1..=1).map(move |dy| CellId {
                ix: self.ix + dx,
                iy: self.iy + dy,
            })
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitConfig {
    pub cell_size: f64,
    pub n_folds: usize,
    /// Validation fold, zero-based.
    pub fold: usize,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            cell_size: DEFAULT_CELL_SIZE,
            n_folds: DEFAULT_FOLDS,
            fold: 0,
        }
    }
}

pub fn assign_cells(points: &[(f64, f64)], cell_size: f64) -> Result<Vec<CellId>> {
    if !(cell_size > 0.0 && cell_size.is_finite()) {
        return Err(Error::InvalidArgument(format!("cell size {cell_size}")));
    }
    points
        .iter()
        .map(|&(x, y)| {
            if !(x.is_finite() && y.is_finite()) {
                return Err(Error::NonFinite(format!("location ({x}, {y})")));
            }
            Ok(CellId {
                ix: (x / cell_size).floor() as i64,
                iy: (y / cell_size).floor() as i64,
            })
        })
        .collect()
}

/// Shuffles the distinct cells and deals them round-robin into `k` folds.
pub fn make_folds(cells: &[CellId], k: usize, rng: &mut Rng) -> Result<BTreeMap<CellId, usize>> {
    if k < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 folds, got {k}")));
    }
    let mut distinct: Vec<CellId> = cells.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
    if distinct.len() < k {
        return Err(Error::TooFewCells {
            cells: distinct.len(),
            folds: k,
        });
    }
    rng.shuffle(&mut distinct);
    Ok(distinct.into_iter().enumerate().map(|(i, c)| (c, i % k)).collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Train,
    Validation,
    Excluded,
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Role::Train => "train",
            Role::Validation => "validation",
            Role::Excluded => "excluded",
        })
    }
}

/// Per-sample cell, fold and role for one validation fold.
#[derive(Clone, Debug, PartialEq)]
pub struct FoldAssignment {
    pub cell_size: f64,
    pub n_folds: usize,
    pub fold: usize,
    pub cells: Vec<CellId>,
    pub folds: Vec<usize>,
    pub roles: Vec<Role>,
}

impl FoldAssignment {
    /// Cells, folds and the buffered split for `cfg.fold`, in one call.
    pub fn build(points: &[(f64, f64)], cfg: &SplitConfig, rng: &mut Rng) -> Result<Self> {
        let cells = assign_cells(points, cfg.cell_size)?;
        let fold_of = make_folds(&cells, cfg.n_folds, rng)?;
        buffered_split(&cells, &fold_of, cfg.cell_size, cfg.fold)
    }

    pub fn len(&self) -> usize {
        self.roles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.roles.is_empty()
    }

    pub fn indices(&self, role: Role) -> Vec<usize> {
        (0..self.roles.len()).filter(|&i| self.roles[i] == role).collect()
    }

    pub fn train(&self) -> Vec<usize> {
        self.indices(Role::Train)
    }

    pub fn validation(&self) -> Vec<usize> {
        self.indices(Role::Validation)
    }

    pub fn excluded(&self) -> Vec<usize> {
        self.indices(Role::Excluded)
    }

    /// Confirms that `train` holds no sample lying in a validation cell or
    /// in the buffer ring around one.
    pub fn check_train_indices(&self, train: &[usize]) -> Result<()> {
        let val_cells: BTreeSet<CellId> = self.validation().iter().map(|&i| self.cells[i]).collect();
        for &t in train {
            let c = self.cells.get(t).ok_or_else(|| Error::InvalidArgument(format!("sample {t} out of range")))?;
            if c.neighbourhood().any(|n| val_cells.contains(&n)) {
                return Err(Error::LeakageDetected(format!(
                    "training sample {t} in cell ({}, {}) touches a validation cell",
                    c.ix, c.iy
                )));
            }
        }
        Ok(())
    }

    /// Exhaustive pairwise check over every (train, validation) pair.
    pub fn verify_exhaustive(&self, points: &[(f64, f64)]) -> Result<()> {
        let val = self.validation();
        for t in self.train() {
            for &v in &val {
                let d = self.cells[t].chebyshev(&self.cells[v]);
                let (a, b) = (points[t], points[v]);
                let planar = (a.0 - b.0).hypot(a.1 - b.1);
                if d < 2 || planar < self.cell_size {
                    return Err(Error::LeakageDetected(format!(
                        "train {t} and validation {v}: cell distance {d}, {planar:.1} m"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn write_manifest(&self, ids: &[String], path: &Path) -> Result<()> {
        if ids.len() != self.len() {
            return Err(Error::ShapeMismatch(format!("{} ids for {} samples", ids.len(), self.len())));
        }
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_io(path, e))?;
        w.write_record(["sample_id", "cell_ix", "cell_iy", "fold", "role"])?;
        for (i, id) in ids.iter().enumerate() {
            let c = self.cells[i];
            w.write_record([
                id.clone(),
                c.ix.to_string(),
                c.iy.to_string(),
                self.folds[i].to_string(),
                self.roles[i].to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    /// Reads a manifest back; returns the sample ids alongside.
    pub fn read_manifest(path: &Path, cell_size: f64) -> Result<(Vec<String>, Self)> {
        #[derive(Deserialize)]
        struct Row {
            sample_id: String,
            cell_ix: i64,
            cell_iy: i64,
            fold: usize,
            role: Role,
        }
        let mut r = csv::Reader::from_path(path).map_err(|e| csv_io(path, e))?;
        let mut ids = Vec::new();
        let mut out = FoldAssignment {
            cell_size,
            n_folds: 0,
            fold: 0,
            cells: Vec::new(),
            folds: Vec::new(),
            roles: Vec::new(),
        };
        for row in r.deserialize() {
            let row: Row = row?;
            if row.role == Role::Validation {
                out.fold = row.fold;
            }
            out.n_folds = out.n_folds.max(row.fold + 1);
            ids.push(row.sample_id);
            out.cells.push(CellId {
                ix: row.cell_ix,
                iy: row.cell_iy,
            });
            out.folds.push(row.fold);
            out.roles.push(row.role);
        }
        Ok((ids, out))
    }
}

fn csv_io(path: &Path, e: csv::Error) -> Error {
    if e.is_io_error() {
        match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            _ => unreachable!("checked io kind"),
        }
    } else {
        Error::Csv(e)
    }
}

/// Validation = samples in fold `fold`; excluded = non-validation samples
/// in any cell within Chebyshev distance 1 of a validation cell.
pub fn buffered_split(
    cells: &[CellId],
    fold_of: &BTreeMap<CellId, usize>,
    cell_size: f64,
    fold: usize,
) -> Result<FoldAssignment> {
    let n_folds = fold_of.values().max().map_or(0, |m| m + 1);
    if fold >= n_folds {
        return Err(Error::InvalidArgument(format!("fold {fold} of {n_folds}")));
    }
    let folds = cells
        .iter()
        .map(|c| {
            fold_of
                .get(c)
                .copied()
                .ok_or_else(|| Error::InvalidArgument(format!("cell ({}, {}) has no fold", c.ix, c.iy)))
        })
        .collect::<Result<Vec<_>>>()?;
    let val_cells: BTreeSet<CellId> = fold_of.iter().filter(|&(_, &f)| f == fold).map(|(&c, _)| c).collect();
    let roles = cells
        .iter()
        .map(|c| {
            if val_cells.contains(c) {
                Role::Validation
            } else if c.neighbourhood().any(|n| val_cells.contains(&n)) {
                Role::Excluded
            } else {
                Role::Train
            }
        })
        .collect();
    Ok(FoldAssignment {
        cell_size,
        n_folds,
        fold,
        cells: cells.to_vec(),
        folds,
        roles,
    })
}

/// Non-spatial control: each sample goes to validation with probability
/// `val_fraction`, no buffer.
pub fn random_split(points: &[(f64, f64)], cell_size: f64, val_fraction: f64, rng: &mut Rng) -> Result<FoldAssignment> {
    let cells = assign_cells(points, cell_size)?;
    let roles: Vec<Role> = (0..points.len())
        .map(|_| {
            if rng.bernoulli(val_fraction) {
                Role::Validation
            } else {
                Role::Train
            }
        })
        .collect();
    Ok(FoldAssignment {
        cell_size,
        n_folds: 2,
        fold: 1,
        folds: roles.iter().map(|&r| usize::from(r == Role::Validation)).collect(),
        cells,
        roles,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cell(ix: i64, iy: i64) -> CellId {
        CellId { ix, iy }
    }

    #[test]
    fn cell_examples() {
        let c = assign_cells(&[(12000.0, 3000.0), (-1.0, -1.0), (5000.0, 0.0)], 5000.0).unwrap();
        assert_eq!(c, vec![cell(2, 0), cell(-1, -1), cell(1, 0)]);
        assert!(assign_cells(&[(f64::NAN, 0.0)], 5000.0).is_err());
        assert!(assign_cells(&[(0.0, 0.0)], 0.0).is_err());
    }

    #[test]
    fn fold_examples() {
        let cells: Vec<CellId> = (0..10).map(|i| cell(i, 0)).collect();
        let f = make_folds(&cells, 5, &mut crate::numerics::Rng::new(1)).unwrap();
        let mut sizes = [0; 5];
        f.values().for_each(|&k| sizes[k] += 1);
        assert_eq!(sizes, [2; 5]);
        assert_eq!(f, make_folds(&cells, 5, &mut crate::numerics::Rng::new(1)).unwrap());
        assert!(matches!(
            make_folds(&cells[..3], 5, &mut crate::numerics::Rng::new(1)),
            Err(Error::TooFewCells { cells: 3, folds: 5 })
        ));
    }

    #[test]
    fn buffer_examples() {
        let cells = vec![cell(0, 0), cell(1, 1), cell(2, 0), cell(0, 0), cell(5, 5)];
        let fold_of: BTreeMap<CellId, usize> =
            [(cell(0, 0), 0), (cell(1, 1), 1), (cell(2, 0), 1), (cell(5, 5), 1)].into_iter().collect();
        let a = buffered_split(&cells, &fold_of, 5000.0, 0).unwrap();
        assert_eq!(
            a.roles,
            vec![Role::Validation, Role::Excluded, Role::Train, Role::Validation, Role::Train]
        );
        a.check_train_indices(&a.train()).unwrap();
        assert!(matches!(a.check_train_indices(&[1]), Err(Error::LeakageDetected(_))));
        // a validation cell adjacent to another validation cell stays validation
        let fold_of: BTreeMap<CellId, usize> = [(cell(0, 0), 0), (cell(1, 0), 0), (cell(9, 9), 1)].into_iter().collect();
        let a = buffered_split(&[cell(0, 0), cell(1, 0)], &fold_of, 1.0, 0).unwrap();
        assert_eq!(a.roles, vec![Role::Validation; 2]);
    }

    #[test]
    fn manifest_round_trip() {
        let pts: Vec<(f64, f64)> = (0..40).map(|i| ((i * 3100) as f64, (i % 7 * 4900) as f64)).collect();
        let a = FoldAssignment::build(&pts, &SplitConfig::default(), &mut crate::numerics::Rng::new(2)).unwrap();
        let ids: Vec<String> = (0..40).map(|i| format!("p{i}")).collect();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("split.csv");
        a.write_manifest(&ids, &path).unwrap();
        let (back_ids, back) = FoldAssignment::read_manifest(&path, 5000.0).unwrap();
        assert_eq!(back_ids, ids);
        assert_eq!(back.roles, a.roles);
        assert_eq!(back.cells, a.cells);
        assert_eq!(back.folds, a.folds);
    }

    proptest! {
        #[test]
        fn split_partitions_and_separates(seed in 0u64..300, n in 20usize..200) {
            let mut rng = crate::numerics::Rng::new(seed);
            let pts: Vec<(f64, f64)> = (0..n).map(|_| (rng.uniform_range(-4e4, 4e4), rng.uniform_range(-4e4, 4e4))).collect();
            let cfg = SplitConfig { fold: (seed % 5) as usize, ..SplitConfig::default() };
            if let Ok(a) = FoldAssignment::build(&pts, &cfg, &mut rng) {
                let total = a.train().len() + a.validation().len() + a.excluded().len();
                prop_assert_eq!(total, n);
                prop_assert!(a.verify_exhaustive(&pts).is_ok());
            }
        }

        #[test]
        fn cells_shift_with_translation(x in -1e6f64..1e6, y in -1e6f64..1e6) {
            let a = assign_cells(&[(x, y)], 5000.0).unwrap()[0];
            let b = assign_cells(&[(x + 5000.0, y - 5000.0)], 5000.0).unwrap()[0];
            // exact shift unless the sum rounds across a cell boundary
            let exact = ((x + 5000.0) / 5000.0).floor() == (x / 5000.0).floor() + 1.0
                && ((y - 5000.0) / 5000.0).floor() == (y / 5000.0).floor() - 1.0;
            prop_assume!(exact);
            prop_assert_eq!(b, cell(a.ix + 1, a.iy - 1));
        }
    }
}
