//! Tabular ecology inputs: cover matrices, presence/absence sets, soil tables,
//! and the paired image/relevé dataset used for alignment.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Matrix, Rng};

/// Braun-Blanquet codes in increasing cover order.
pub const BB_CODES: [&str; 7] = ["r", "+", "1", "2", "3", "4", "5"];

/// Percent cover assigned to each Braun-Blanquet code (interval midpoints,
/// `r` read as negligible cover).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CoverScale {
    pub percent: [f64; 7],
}

impl Default for CoverScale {
    fn default() -> Self {
        Self {
            percent: [0.1, 0.5, 2.5, 15.0, 37.5, 62.5, 87.5],
        }
    }
}

impl CoverScale {
    pub fn to_percent(&self, code: &str) -> Result<f64> {
        BB_CODES
            .iter()
            .position(|&c| c == code.trim())
            .map(|i| self.percent[i])
            .ok_or_else(|| Error::UnknownClass(code.to_owned()))
    }
}

pub fn braun_blanquet_to_percent(code: &str) -> Result<f64> {
    CoverScale::default().to_percent(code)
}

/// One vegetation plot.
#[derive(Clone, Debug, PartialEq)]
pub struct Releve {
    pub plot_id: String,
    pub location: (f64, f64),
    /// `(species id, Braun-Blanquet code)`.
    pub species_covers: Vec<(String, String)>,
    pub class: usize,
}

/// Plots × species percent cover.
#[derive(Clone, Debug, PartialEq)]
pub struct CoverMatrix {
    pub values: Matrix,
    pub species: Vec<String>,
    pub plots: Vec<String>,
}

/// Builds the cover matrix in input order; returns it with the plot classes.
pub fn build_cover_matrix(
    releves: &[Releve],
    species_index: &[String],
    scale: &CoverScale,
) -> Result<(CoverMatrix, Vec<usize>)> {
    let column: BTreeMap<&str, usize> = species_index
        .iter()
        .enumerate()
        .map(|(i, s)| (s.as_str(), i))
        .collect();
    if column.len() != species_index.len() {
        return Err(Error::DuplicateEntry("species index".into()));
    }
    let mut values = Matrix::zeros(releves.len(), species_index.len());
    for (r, releve) in releves.iter().enumerate() {
        let mut seen = BTreeSet::new();
        for (species, code) in &releve.species_covers {
            let &c = column
                .get(species.as_str())
                .ok_or_else(|| Error::UnknownSpecies(species.clone()))?;
            if !seen.insert(c) {
                return Err(Error::DuplicateEntry(format!(
                    "species {species} twice in plot {}",
                    releve.plot_id
                )));
            }
            values.set(r, c, scale.to_percent(code)?);
        }
    }
    Ok((
        CoverMatrix {
            values,
            species: species_index.to_vec(),
            plots: releves.iter().map(|r| r.plot_id.clone()).collect(),
        },
        releves.iter().map(|r| r.class).collect(),
    ))
}

pub fn binarize_presence(cover: &Matrix) -> Matrix {
    cover.map(|v| if v > 0.0 { 1.0 } else { 0.0 })
}

/// Column indices whose presence count lies in `[min, max]`.
pub fn filter_by_support(binary: &Matrix, min_presences: usize, max_presences: Option<usize>) -> Vec<usize> {
    let max = max_presences.unwrap_or(usize::MAX);
    binary
        .column_sums()
        .iter()
        .enumerate()
        .filter(|&(_, &c)| {
            let c = c as usize;
            c >= min_presences && c <= max
        })
        .map(|(j, _)| j)
        .collect()
}

/// Downsamples `absences` without replacement to `|presences|`.
pub fn balance_downsample(presences: &[usize], absences: &[usize], rng: &mut Rng) -> Result<Vec<usize>> {
    if absences.len() < presences.len() {
        return Err(Error::InsufficientAbsences {
            needed: presences.len(),
            available: absences.len(),
        });
    }
    let mut picked: Vec<usize> = rng
        .sample_indices(absences.len(), presences.len())
        .into_iter()
        .map(|i| absences[i])
        .collect();
    picked.sort_unstable();
    Ok(picked)
}

#[derive(Clone, Debug, PartialEq)]
pub struct OccurrenceSet {
    pub species_id: String,
    pub presences: Vec<(f64, f64)>,
    pub candidates: Vec<(f64, f64)>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LabeledPoint {
    pub x: f64,
    pub y: f64,
    pub label: u8,
}

/// Presences labelled 1 plus an equal number of candidate absences labelled 0.
/// Candidates sharing a coordinate with a presence are dropped first.
pub fn make_pseudo_absences(occ: &OccurrenceSet, rng: &mut Rng) -> Result<Vec<LabeledPoint>> {
    let key = |p: &(f64, f64)| (p.0.to_bits(), p.1.to_bits());
    let taken: BTreeSet<_> = occ.presences.iter().map(key).collect();
    let candidates: Vec<(f64, f64)> = occ
        .candidates
        .iter()
        .filter(|p| !taken.contains(&key(p)))
        .copied()
        .collect();
    let pres_idx: Vec<usize> = (0..occ.presences.len()).collect();
    let abs_idx: Vec<usize> = (0..candidates.len()).collect();
    let kept = balance_downsample(&pres_idx, &abs_idx, rng)?;
    let mut out: Vec<LabeledPoint> = occ
        .presences
        .iter()
        .map(|&(x, y)| LabeledPoint { x, y, label: 1 })
        .collect();
    out.extend(kept.into_iter().map(|i| LabeledPoint {
        x: candidates[i].0,
        y: candidates[i].1,
        label: 0,
    }));
    Ok(out)
}

/// Samples × trophic-group abundances with location and elevation.
#[derive(Clone, Debug, PartialEq)]
pub struct TrophicTable {
    pub sample_ids: Vec<String>,
    pub locations: Vec<(f64, f64)>,
    pub elevation: Vec<f64>,
    pub abundances: Matrix,
}

/// Row-wise relative proportions, then per-column min-max scaling.
/// Constant columns become 0.
pub fn normalize_soil(raw: &TrophicTable) -> Result<TrophicTable> {
    let a = &raw.abundances;
    let mut rel = a.clone();
    for i in 0..a.rows() {
        let row = rel.row_mut(i);
        if row.iter().any(|&v| v < 0.0) {
            return Err(Error::InvalidArgument(format!("negative abundance in sample {i}")));
        }
        let total: f64 = row.iter().sum();
        if total <= 0.0 {
            return Err(Error::EmptySample(i));
        }
        row.iter_mut().for_each(|v| *v /= total);
    }
    for j in 0..rel.cols() {
        let (lo, hi) = (0..rel.rows())
            .map(|i| rel.get(i, j))
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
        let span = hi - lo;
        for i in 0..rel.rows() {
            let v = if span > 0.0 { (rel.get(i, j) - lo) / span } else { 0.0 };
            rel.set(i, j, v);
        }
    }
    Ok(TrophicTable {
        abundances: rel,
        ..raw.clone()
    })
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Strata {
    pub ids: Vec<usize>,
    /// Strata that received no sample (tied elevations).
    pub empty: Vec<usize>,
}

/// Quantile-edge elevation bins. Edge `k` is the value at sorted rank
/// `⌊k·n/s⌋`; a sample's stratum is the number of edges at or below it.
pub fn stratify_by_elevation(elevations: &[f64], n_strata: usize) -> Result<Strata> {
    if n_strata < 2 {
        return Err(Error::InvalidArgument("need at least 2 strata".into()));
    }
    if elevations.iter().any(|e| !e.is_finite()) {
        return Err(Error::NonFinite("elevation".into()));
    }
    let n = elevations.len();
    let mut sorted = elevations.to_vec();
    sorted.sort_by(f64::total_cmp);
    let edges: Vec<f64> = if n == 0 {
        Vec::new()
    } else {
        (1..n_strata).map(|k| sorted[(k * n / n_strata).min(n - 1)]).collect()
    };
    let ids: Vec<usize> = elevations
        .iter()
        .map(|&e| edges.iter().filter(|&&edge| edge <= e).count())
        .collect();
    let mut counts = vec![0usize; n_strata];
    ids.iter().for_each(|&s| counts[s] += 1);
    let empty = (0..n_strata).filter(|&s| counts[s] == 0).collect();
    Ok(Strata { ids, empty })
}

/// Relevés with one or more precomputed image embeddings each.
///
/// `images` holds every view as a row; `owner[r]` is the pair that image
/// row `r` belongs to.
#[derive(Clone, Debug, PartialEq)]
pub struct PairedDataset {
    pub ids: Vec<String>,
    pub locations: Vec<(f64, f64)>,
    pub cover: Matrix,
    pub images: Matrix,
    pub owner: Vec<usize>,
    pub classes: Option<Vec<usize>>,
}

impl PairedDataset {
    pub fn validate(&self) -> Result<()> {
        let n = self.cover.rows();
        if self.ids.len() != n || self.locations.len() != n {
            return Err(Error::ShapeMismatch(format!(
                "{n} cover rows, {} ids, {} locations",
                self.ids.len(),
                self.locations.len()
            )));
        }
        if self.owner.len() != self.images.rows() {
            return Err(Error::ShapeMismatch(format!(
                "{} image rows, {} owners",
                self.images.rows(),
                self.owner.len()
            )));
        }
        if let Some(c) = &self.classes {
            if c.len() != n {
                return Err(Error::ShapeMismatch(format!("{} class labels for {n} pairs", c.len())));
            }
        }
        let mut has_view = vec![false; n];
        for &o in &self.owner {
            if o >= n {
                return Err(Error::InvalidArgument(format!("image owner {o} out of range")));
            }
            has_view[o] = true;
        }
        if let Some(p) = has_view.iter().position(|&h| !h) {
            return Err(Error::InvalidArgument(format!("pair {} has no image view", self.ids[p])));
        }
        Ok(())
    }

    pub fn n_pairs(&self) -> usize {
        self.cover.rows()
    }

    pub fn n_views(&self) -> usize {
        self.images.rows()
    }

    /// Image rows belonging to any of `pairs`, in image-row order.
    pub fn expand(&self, pairs: &[usize]) -> Vec<usize> {
        let wanted: BTreeSet<usize> = pairs.iter().copied().collect();
        (0..self.owner.len()).filter(|&r| wanted.contains(&self.owner[r])).collect()
    }

    /// First image row of each pair, in the order of `pairs`.
    pub fn first_views(&self, pairs: &[usize]) -> Vec<usize> {
        let mut first = vec![usize::MAX; self.n_pairs()];
        for (r, &o) in self.owner.iter().enumerate().rev() {
            first[o] = r;
        }
        pairs.iter().map(|&p| first[p]).collect()
    }
}
