//! Downstream tasks on frozen embeddings: plant presence on the buffered
//! fold, butterfly presence from pseudo-absences with spatial k-fold, and
//! soil trophic-group abundance with elevation-stratified k-fold.

use std::collections::BTreeSet;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{balance_downsample, filter_by_support, stratify_by_elevation, TrophicTable};
use crate::error::{Error, Result};
use crate::forest::{fit_classifier, fit_regressor, ForestConfig};
use crate::metrics::{boyce_index, classification_metrics, mae, spearman_rho, ConfusionCounts, MetricReport};
use crate::numerics::{Matrix, Rng};
use crate::spatial::{assign_cells, buffered_split, make_folds, FoldAssignment, DEFAULT_CELL_SIZE};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SupportBounds {
    pub min: usize,
    pub max: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Plant,
    Butterfly,
    Soil,
}

impl std::str::FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "plant" => Ok(Task::Plant),
            "butterfly" => Ok(Task::Butterfly),
            "soil" => Ok(Task::Soil),
            other => Err(Error::Config(format!("unknown task {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub forest: ForestConfig,
    /// Probability at or above which a sample is predicted present.
    pub threshold: f64,
    /// Independent repetitions (absence draws, fold draws, forest seeds).
    pub repeats: usize,
    pub plant_support: SupportBounds,
    pub butterfly_support: SupportBounds,
    pub butterfly_folds: usize,
    pub butterfly_cell_size: f64,
    pub soil_folds: usize,
    pub soil_strata: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            forest: ForestConfig::default(),
            threshold: 0.5,
            repeats: 10,
            plant_support: SupportBounds { min: 1000, max: None },
            butterfly_support: SupportBounds {
                min: 100,
                max: Some(1000),
            },
            butterfly_folds: 5,
            butterfly_cell_size: DEFAULT_CELL_SIZE,
            soil_folds: 5,
            soil_strata: 5,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.repeats == 0 {
            return Err(Error::Config("eval.repeats must be ≥ 1".into()));
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(Error::Config("eval.threshold must lie in [0, 1]".into()));
        }
        if self.butterfly_folds < 2 || self.soil_folds < 2 {
            return Err(Error::Config("eval fold counts must be ≥ 2".into()));
        }
        Ok(())
    }
}

pub const PLANT_METRICS: [&str; 3] = ["tss", "f1", "sensitivity"];
pub const BUTTERFLY_METRICS: [&str; 4] = ["tss", "bi", "f1", "sensitivity"];
pub const SOIL_METRICS: [&str; 2] = ["mae", "spearman"];

/// Running per-metric means that skip undefined values.
struct Averages {
    sums: Vec<f64>,
    counts: Vec<usize>,
}

impl Averages {
    fn new(k: usize) -> Self {
        Self {
            sums: vec![0.0; k],
            counts: vec![0; k],
        }
    }

    fn add(&mut self, values: &[Option<f64>]) {
        for (j, v) in values.iter().enumerate() {
            if let Some(v) = v.filter(|v| v.is_finite()) {
                self.sums[j] += v;
                self.counts[j] += 1;
            }
        }
    }

    /// `None` when some metric never had a defined value.
    fn finish(self) -> Option<Vec<f64>> {
        self.sums
            .iter()
            .zip(&self.counts)
            .map(|(&s, &c)| (c > 0).then(|| s / c as f64))
            .collect()
    }
}

fn forest_for(cfg: &EvalConfig, rng: &mut Rng) -> ForestConfig {
    ForestConfig {
        seed: rng.next_u64(),
        ..cfg.forest
    }
}

fn split_by_label(idx: &[usize], positive: impl Fn(usize) -> bool) -> (Vec<usize>, Vec<usize>) {
    idx.iter().partition(|&&i| positive(i))
}

/// Equal numbers of presences and absences: absences are downsampled to the
/// presence count, or presences to the absence count when they outnumber them.
fn balanced(pres: &[usize], abs: &[usize], rng: &mut Rng) -> Result<Vec<usize>> {
    let mut out = if abs.len() >= pres.len() {
        let mut v = pres.to_vec();
        v.extend(balance_downsample(pres, abs, rng)?);
        v
    } else {
        let mut v = balance_downsample(abs, pres, rng)?;
        v.extend_from_slice(abs);
        v
    };
    out.sort_unstable();
    Ok(out)
}

/// Fits on `train` and returns presence probabilities for `val`.
fn fit_and_score(x: &Matrix, labels: &[u8], train: &[usize], val: &[usize], forest: &ForestConfig) -> Result<Vec<f64>> {
    let y: Vec<u8> = train.iter().map(|&i| labels[i]).collect();
    let model = fit_classifier(&x.select_rows(train), &y, forest)?;
    model.predict_proba(&x.select_rows(val))
}

fn binary_metrics(truth: &[u8], proba: &[f64], threshold: f64) -> Result<Option<[f64; 3]>> {
    let counts = ConfusionCounts::from_scores(truth, proba, threshold)?;
    match classification_metrics(&counts) {
        Ok(m) => Ok(Some([m.tss, m.f1, m.sensitivity])),
        Err(Error::UndefinedMetric(_)) => Ok(None),
        Err(e) => Err(e),
    }
}

/// Plant presence: true presence/absence per plot on the given buffered
/// fold, classes balanced by downsampling in both train and validation.
/// Species outside the support bounds, or lacking either class
/// on either side of the split, are left out of the report.
pub fn plant_task(
    model: &str,
    embeddings: &Matrix,
    presence: &Matrix,
    species: &[String],
    split: &FoldAssignment,
    cfg: &EvalConfig,
    seed: u64,
) -> Result<MetricReport> {
    cfg.validate()?;
    check_rows(embeddings, presence.rows(), "presence table")?;
    if split.len() != presence.rows() {
        return Err(Error::ShapeMismatch(format!(
            "split covers {} plots, presence table has {}",
            split.len(),
            presence.rows()
        )));
    }
    let kept = filter_by_support(presence, cfg.plant_support.min, cfg.plant_support.max);
    let (train, val) = (split.train(), split.validation());
    let root = Rng::new(seed);
    let rows: Vec<Option<Vec<f64>>> = kept
        .par_iter()
        .map(|&s| -> Result<Option<Vec<f64>>> {
            let labels: Vec<u8> = (0..presence.rows()).map(|i| u8::from(presence.get(i, s) > 0.0)).collect();
            let (tp, ta) = split_by_label(&train, |i| labels[i] == 1);
            let (vp, va) = split_by_label(&val, |i| labels[i] == 1);
            if [&tp, &ta, &vp, &va].iter().any(|v| v.is_empty()) {
                return Ok(None);
            }
            let mut avg = Averages::new(PLANT_METRICS.len());
            for r in 0..cfg.repeats {
                let mut rng = root.substream(&format!("plant/{}", species[s]), r as u64);
                let tr = balanced(&tp, &ta, &mut rng)?;
                let vl = balanced(&vp, &va, &mut rng)?;
                let proba = fit_and_score(embeddings, &labels, &tr, &vl, &forest_for(cfg, &mut rng))?;
                let truth: Vec<u8> = vl.iter().map(|&i| labels[i]).collect();
                if let Some(m) = binary_metrics(&truth, &proba, cfg.threshold)? {
                    avg.add(&m.map(Some));
                }
            }
            Ok(avg.finish())
        })
        .collect::<Result<_>>()?;
    let mut report = MetricReport::new(model, &PLANT_METRICS);
    for (&s, row) in kept.iter().zip(rows) {
        if let Some(v) = row {
            report.push(species[s].clone(), &v)?;
        }
    }
    Ok(report)
}

fn check_rows(embeddings: &Matrix, n: usize, what: &str) -> Result<()> {
    if embeddings.rows() != n {
        return Err(Error::ShapeMismatch(format!(
            "{} embedding rows for {n} rows of the {what}",
            embeddings.rows()
        )));
    }
    Ok(())
}

/// Presence-only occurrences over a shared point set.
#[derive(Clone, Debug, PartialEq)]
pub struct OccurrenceData {
    pub points: Vec<(f64, f64)>,
    /// `(species, presence point indices)`.
    pub species: Vec<(String, Vec<usize>)>,
}

impl OccurrenceData {
    /// Every record becomes a point (deduplicated by `point_id`, first
    /// appearance order); records labelled 1 are presences of their species.
    pub fn from_records(records: &[crate::io::OccurrenceRecord]) -> (Self, Vec<String>) {
        let mut point_ids: Vec<String> = Vec::new();
        let mut points = Vec::new();
        let mut slot = std::collections::BTreeMap::new();
        let mut species: Vec<(String, BTreeSet<usize>)> = Vec::new();
        let mut sp_slot = std::collections::BTreeMap::new();
        for r in records {
            let p = *slot.entry(r.point_id.clone()).or_insert_with(|| {
                point_ids.push(r.point_id.clone());
                points.push((r.x, r.y));
                points.len() - 1
            });
            let s = *sp_slot.entry(r.species_id.clone()).or_insert_with(|| {
                species.push((r.species_id.clone(), BTreeSet::new()));
                species.len() - 1
            });
            if r.label == 1 {
                species[s].1.insert(p);
            }
        }
        let species = species.into_iter().map(|(n, s)| (n, s.into_iter().collect())).collect();
        (Self { points, species }, point_ids)
    }
}

/// Butterfly presence: presences plus an equal number of pseudo-absences
/// drawn from every other point (points sharing a presence coordinate are
/// never absences), spatial k-fold with a one-cell buffer, metrics averaged
/// over folds and repeats.
pub fn butterfly_task(
    model: &str,
    embeddings: &Matrix,
    occ: &OccurrenceData,
    cfg: &EvalConfig,
    seed: u64,
) -> Result<MetricReport> {
    cfg.validate()?;
    check_rows(embeddings, occ.points.len(), "occurrence points")?;
    let root = Rng::new(seed);
    let key = |p: &(f64, f64)| (p.0.to_bits(), p.1.to_bits());
    let rows: Vec<Option<Vec<f64>>> = occ
        .species
        .par_iter()
        .map(|(name, pres)| -> Result<Option<Vec<f64>>> {
            let n_pres = pres.len();
            if n_pres < cfg.butterfly_support.min || cfg.butterfly_support.max.is_some_and(|m| n_pres > m) {
                return Ok(None);
            }
            let taken: BTreeSet<_> = pres.iter().map(|&i| key(&occ.points[i])).collect();
            let candidates: Vec<usize> = (0..occ.points.len())
                .filter(|&i| !taken.contains(&key(&occ.points[i])))
                .collect();
            if candidates.len() < n_pres {
                return Ok(None);
            }
            let mut avg = Averages::new(BUTTERFLY_METRICS.len());
            for r in 0..cfg.repeats {
                let mut rng = root.substream(&format!("butterfly/{name}"), r as u64);
                let absent = balance_downsample(pres, &candidates, &mut rng)?;
                let set: Vec<usize> = pres.iter().copied().chain(absent).collect();
                let labels: Vec<u8> = (0..set.len()).map(|k| u8::from(k < n_pres)).collect();
                let x = embeddings.select_rows(&set);
                let pts: Vec<(f64, f64)> = set.iter().map(|&i| occ.points[i]).collect();
                let cells = assign_cells(&pts, cfg.butterfly_cell_size)?;
                let fold_of = match make_folds(&cells, cfg.butterfly_folds, &mut rng) {
                    Ok(f) => f,
                    Err(Error::TooFewCells { .. }) => return Ok(None),
                    Err(e) => return Err(e),
                };
                for f in 0..cfg.butterfly_folds {
                    let split = buffered_split(&cells, &fold_of, cfg.butterfly_cell_size, f)?;
                    let (train, val) = (split.train(), split.validation());
                    let has_both = |idx: &[usize]| {
                        idx.iter().any(|&i| labels[i] == 1) && idx.iter().any(|&i| labels[i] == 0)
                    };
                    if !has_both(&train) || !has_both(&val) {
                        continue;
                    }
                    let proba = fit_and_score(&x, &labels, &train, &val, &forest_for(cfg, &mut rng))?;
                    let truth: Vec<u8> = val.iter().map(|&i| labels[i]).collect();
                    let cls = binary_metrics(&truth, &proba, cfg.threshold)?;
                    let at_presences: Vec<f64> =
                        proba.iter().zip(&truth).filter(|(_, &t)| t == 1).map(|(p, _)| *p).collect();
                    let bi = match boyce_index(&at_presences, &proba) {
                        Ok(v) => Some(v),
                        Err(Error::Degenerate(_) | Error::ZeroVariance(_)) => None,
                        Err(e) => return Err(e),
                    };
                    avg.add(&[cls.map(|m| m[0]), bi, cls.map(|m| m[1]), cls.map(|m| m[2])]);
                }
            }
            Ok(avg.finish())
        })
        .collect::<Result<_>>()?;
    let mut report = MetricReport::new(model, &BUTTERFLY_METRICS);
    for ((name, _), row) in occ.species.iter().zip(rows) {
        if let Some(v) = row {
            report.push(name.clone(), &v)?;
        }
    }
    Ok(report)
}

/// Fold ids dealt round-robin within each elevation stratum after a shuffle,
/// continuing the deal across strata so fold sizes differ by at most one.
pub fn stratified_folds(strata: &[usize], k: usize, rng: &mut Rng) -> Vec<usize> {
    let n_strata = strata.iter().max().map_or(0, |m| m + 1);
    let mut fold = vec![0; strata.len()];
    let mut next = 0;
    for s in 0..n_strata {
        let mut members: Vec<usize> = (0..strata.len()).filter(|&i| strata[i] == s).collect();
        rng.shuffle(&mut members);
        for i in members {
            fold[i] = next % k;
            next += 1;
        }
    }
    fold
}

/// Soil trophic groups: one regressor per group on normalized abundances,
/// k-fold stratified by elevation quantiles.
pub fn soil_task(
    model: &str,
    embeddings: &Matrix,
    table: &TrophicTable,
    groups: &[String],
    cfg: &EvalConfig,
    seed: u64,
) -> Result<MetricReport> {
    cfg.validate()?;
    let n = table.sample_ids.len();
    check_rows(embeddings, n, "soil table")?;
    if n < cfg.soil_folds {
        return Err(Error::InvalidArgument(format!("{n} soil samples for {} folds", cfg.soil_folds)));
    }
    let strata = stratify_by_elevation(&table.elevation, cfg.soil_strata)?;
    let root = Rng::new(seed);
    let folds: Vec<Vec<usize>> = (0..cfg.repeats)
        .map(|r| stratified_folds(&strata.ids, cfg.soil_folds, &mut root.substream("soil/folds", r as u64)))
        .collect();
    let rows: Vec<Option<Vec<f64>>> = (0..groups.len())
        .into_par_iter()
        .map(|g| -> Result<Option<Vec<f64>>> {
            let y: Vec<f64> = (0..n).map(|i| table.abundances.get(i, g)).collect();
            let mut avg = Averages::new(SOIL_METRICS.len());
            for (r, fold) in folds.iter().enumerate() {
                let mut rng = root.substream(&format!("soil/{}", groups[g]), r as u64);
                for f in 0..cfg.soil_folds {
                    let (test, train): (Vec<usize>, Vec<usize>) = (0..n).partition(|&i| fold[i] == f);
                    let yt: Vec<f64> = train.iter().map(|&i| y[i]).collect();
                    let model = fit_regressor(&embeddings.select_rows(&train), &yt, &forest_for(cfg, &mut rng))?;
                    let pred = model.predict(&embeddings.select_rows(&test))?;
                    let truth: Vec<f64> = test.iter().map(|&i| y[i]).collect();
                    let rho = match spearman_rho(&truth, &pred) {
                        Ok(v) => Some(v),
                        Err(Error::ZeroVariance(_) | Error::ShapeMismatch(_)) => None,
                        Err(e) => return Err(e),
                    };
                    avg.add(&[Some(mae(&truth, &pred)?), rho]);
                }
            }
            Ok(avg.finish())
        })
        .collect::<Result<_>>()?;
    let mut report = MetricReport::new(model, &SOIL_METRICS);
    for (name, row) in groups.iter().zip(rows) {
        if let Some(v) = row {
            report.push(name.clone(), &v)?;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spatial::SplitConfig;

    /// Embeddings that encode presence exactly in one coordinate.
    fn informative(n: usize, prevalence: f64, seed: u64) -> (Matrix, Matrix, Vec<(f64, f64)>) {
        let mut rng = Rng::new(seed);
        let pres: Vec<f64> = (0..n).map(|_| f64::from(u8::from(rng.bernoulli(prevalence)))).collect();
        let x = Matrix::from_fn(n, 4, |i, j| if j == 0 { pres[i] + 0.05 * rng.normal() } else { rng.normal() });
        let locs = (0..n).map(|_| (rng.uniform() * 60_000.0, rng.uniform() * 60_000.0)).collect();
        (x, Matrix::from_fn(n, 1, |i, _| pres[i]), locs)
    }

    fn quick() -> EvalConfig {
        EvalConfig {
            forest: ForestConfig {
                n_trees: 20,
                ..ForestConfig::default()
            },
            repeats: 2,
            plant_support: SupportBounds { min: 10, max: None },
            butterfly_support: SupportBounds { min: 10, max: None },
            ..EvalConfig::default()
        }
    }

    #[test]
    fn plant_task_on_separable_species() {
        let (x, pres, locs) = informative(300, 0.6, 1);
        let split = FoldAssignment::build(&locs, &SplitConfig::default(), &mut Rng::new(2)).unwrap();
        let r = plant_task("m", &x, &pres, &["sp".into()], &split, &quick(), 0).unwrap();
        assert_eq!(r.units, vec!["sp"]);
        assert!(r.column("tss").unwrap()[0] > 0.9);
        let again = plant_task("m", &x, &pres, &["sp".into()], &split, &quick(), 0).unwrap();
        assert_eq!(again, r);
    }

    #[test]
    fn plant_task_applies_support_bounds() {
        let (x, pres, locs) = informative(100, 0.5, 3);
        let split = FoldAssignment::build(&locs, &SplitConfig::default(), &mut Rng::new(2)).unwrap();
        let cfg = EvalConfig {
            plant_support: SupportBounds { min: 1000, max: None },
            ..quick()
        };
        assert!(plant_task("m", &x, &pres, &["sp".into()], &split, &cfg, 0).unwrap().units.is_empty());
    }

    #[test]
    fn butterfly_task_runs_folds() {
        let (x, pres, locs) = informative(400, 0.3, 4);
        let presences: Vec<usize> = (0..400).filter(|&i| pres.get(i, 0) > 0.0).collect();
        let occ = OccurrenceData {
            points: locs,
            species: vec![("b".into(), presences)],
        };
        let r = butterfly_task("m", &x, &occ, &quick(), 0).unwrap();
        assert_eq!(r.metrics, BUTTERFLY_METRICS);
        assert!(r.column("tss").unwrap()[0] > 0.8);
        assert!(r.column("bi").unwrap()[0] > 0.0);
    }

    #[test]
    fn soil_task_recovers_signal() {
        let mut rng = Rng::new(5);
        let n = 200;
        let x = Matrix::from_fn(n, 3, |_, _| rng.normal());
        let abund = Matrix::from_fn(n, 2, |i, g| if g == 0 { x.get(i, 0).exp() } else { rng.uniform() });
        let table = TrophicTable {
            sample_ids: (0..n).map(|i| i.to_string()).collect(),
            locations: vec![(0.0, 0.0); n],
            elevation: (0..n).map(|_| rng.uniform() * 2000.0).collect(),
            abundances: abund,
        };
        let r = soil_task("m", &x, &table, &["signal".into(), "noise".into()], &quick(), 0).unwrap();
        let rho = r.column("spearman").unwrap();
        assert!(rho[0] > 0.8 && rho[1] < 0.4, "{rho:?}");
    }

    #[test]
    fn stratified_folds_balance() {
        let strata: Vec<usize> = (0..53).map(|i| i % 5).collect();
        let f = stratified_folds(&strata, 5, &mut Rng::new(0));
        let mut counts = [0; 5];
        f.iter().for_each(|&k| counts[k] += 1);
        assert!(counts.iter().max().unwrap() - counts.iter().min().unwrap() <= 1);
    }

    #[test]
    fn occurrences_from_records() {
        use crate::io::OccurrenceRecord;
        let rec = |s: &str, p: &str, l| OccurrenceRecord {
            species_id: s.into(),
            x: 0.0,
            y: 0.0,
            label: l,
            point_id: p.into(),
        };
        let (occ, ids) = OccurrenceData::from_records(&[rec("a", "p1", 1), rec("b", "p2", 1), rec("a", "p3", 0)]);
        assert_eq!(ids, vec!["p1", "p2", "p3"]);
        assert_eq!(occ.species, vec![("a".into(), vec![0]), ("b".into(), vec![1])]);
    }
}
