//! Desk-scale synthetic stand-in for paired orthophoto embeddings and relevés.
//!
//! Each occupied grid cell draws a latent vector shared by its relevés; each
//! relevé adds i.i.d. jitter. Image views, cover, classes, presence targets,
//! butterfly-style occurrences and soil abundances are all functions of the
//! latent, so spatially close samples are correlated.

use serde::{Deserialize, Serialize};

use crate::data::{PairedDataset, TrophicTable};
use crate::error::{Error, Result};
use crate::numerics::{l2_normalize_rows, softplus, Matrix, Rng};

use super::embeddings::view_id;
use super::tables::{OccurrenceRecord, SiteTable};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub pairs: usize,
    pub latent_dim: usize,
    pub img_dim: usize,
    /// Cover-table species.
    pub n_species: usize,
    pub views_per_pair: usize,
    /// Scale of the i.i.d. per-view image noise.
    pub noise: f64,
    /// Per-relevé deviation from its cell's latent.
    pub jitter: f64,
    /// Width of an image-only latent factor (terrain, buildings, …) that the
    /// relevés never see; 0 disables it.
    pub nuisance_dim: usize,
    pub nuisance_scale: f64,
    pub n_classes: usize,
    /// Thresholded latent projections used as presence/absence targets.
    pub n_targets: usize,
    pub soil_groups: usize,
    /// Fraction of each cover row forced to zero.
    pub sparsity: f64,
    pub cell_size: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            pairs: 512,
            latent_dim: 8,
            img_dim: 768,
            n_species: 64,
            views_per_pair: 2,
            noise: 0.5,
            jitter: 0.5,
            nuisance_dim: 0,
            nuisance_scale: 0.0,
            n_classes: 8,
            n_targets: 10,
            soil_groups: 8,
            sparsity: 0.7,
            cell_size: 5000.0,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("pairs", self.pairs),
            ("latent_dim", self.latent_dim),
            ("img_dim", self.img_dim),
            ("n_species", self.n_species),
            ("views_per_pair", self.views_per_pair),
            ("n_classes", self.n_classes),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("synth.{name} must be ≥ 1")));
        }
        if !(0.0..1.0).contains(&self.sparsity) {
            return Err(Error::Config("synth.sparsity must lie in [0, 1)".into()));
        }
        if [self.noise, self.jitter, self.nuisance_scale].iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Config("synth noise scales must be finite and ≥ 0".into()));
        }
        if !(self.cell_size > 0.0) {
            return Err(Error::Config("synth.cell_size must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticData {
    pub dataset: PairedDataset,
    pub latents: Matrix,
    pub species: Vec<String>,
    /// `pairs × n_targets` 0/1 table.
    pub presence: SiteTable,
    pub occurrences: Vec<OccurrenceRecord>,
    pub soil: TrophicTable,
    pub soil_groups: Vec<String>,
}

fn gaussian(rows: usize, cols: usize, sd: f64, rng: &mut Rng) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| sd * rng.normal())
}

pub fn generate_synthetic(cfg: &SynthConfig) -> Result<SyntheticData> {
    cfg.validate()?;
    let root = Rng::new(cfg.seed);
    let n = cfg.pairs;
    let d = cfg.latent_dim;

    let n_cells = n.div_ceil(4);
    let side = ((n_cells * 12) as f64).sqrt().ceil() as usize;
    let mut rng = root.substream("cells", 0);
    let cells = rng.sample_indices(side * side, n_cells);
    let cell_latent = gaussian(n_cells, d, 1.0, &mut root.substream("cell-latent", 0));

    let mut rng = root.substream("pairs", 0);
    let norm = (1.0 + cfg.jitter * cfg.jitter).sqrt();
    let mut locations = Vec::with_capacity(n);
    let mut latents = Matrix::zeros(n, d);
    for i in 0..n {
        let c = i % n_cells;
        let (cx, cy) = ((cells[c] % side) as f64, (cells[c] / side) as f64);
        locations.push(((cx + rng.uniform()) * cfg.cell_size, (cy + rng.uniform()) * cfg.cell_size));
        for (t, base) in latents.row_mut(i).iter_mut().zip(cell_latent.row(c)) {
            *t = (base + cfg.jitter * rng.normal()) / norm;
        }
    }
    let ids: Vec<String> = (0..n).map(|i| format!("P{i:05}")).collect();

    let proj_img = gaussian(cfg.img_dim, d, (1.0 / d as f64).sqrt(), &mut root.substream("proj", 0));
    let mut clean = latents.matmul_t(&proj_img)?;
    if cfg.nuisance_dim > 0 && cfg.nuisance_scale > 0.0 {
        let proj_nuis = gaussian(
            cfg.img_dim,
            cfg.nuisance_dim,
            (1.0 / cfg.nuisance_dim as f64).sqrt(),
            &mut root.substream("proj", 1),
        );
        let nuis = gaussian(n, cfg.nuisance_dim, cfg.nuisance_scale, &mut root.substream("nuisance", 0));
        clean.add_assign(&nuis.matmul_t(&proj_nuis)?)?;
    }
    let mut rng = root.substream("view-noise", 0);
    let mut images = Matrix::zeros(n * cfg.views_per_pair, cfg.img_dim);
    let mut owner = Vec::with_capacity(images.rows());
    for i in 0..n {
        for v in 0..cfg.views_per_pair {
            let r = i * cfg.views_per_pair + v;
            for (x, c) in images.row_mut(r).iter_mut().zip(clean.row(i)) {
                *x = c + cfg.noise * rng.normal();
            }
            owner.push(i);
        }
    }
    let images = l2_normalize_rows(&images)?;

    let proj_tab = gaussian(cfg.n_species, d, 1.0, &mut root.substream("proj", 2));
    let mut cover = latents.matmul_t(&proj_tab)?.map(softplus);
    let zeroed = (cfg.sparsity * cfg.n_species as f64).ceil() as usize;
    for i in 0..n {
        let row = cover.row_mut(i);
        let mut order: Vec<usize> = (0..row.len()).collect();
        order.sort_by(|&a, &b| row[a].total_cmp(&row[b]).then(a.cmp(&b)));
        for &j in &order[..zeroed.min(row.len() - 1)] {
            row[j] = 0.0;
        }
        let max = row.iter().cloned().fold(0.0, f64::max);
        if max > 0.0 {
            row.iter_mut().for_each(|v| *v = *v / max * 100.0);
        }
    }

    let proj_cls = gaussian(cfg.n_classes, d, 1.0, &mut root.substream("proj", 3));
    let class_scores = latents.matmul_t(&proj_cls)?;
    let classes: Vec<usize> = class_scores
        .iter_rows()
        .map(|r| (0..r.len()).max_by(|&a, &b| r[a].total_cmp(&r[b]).then(b.cmp(&a))).unwrap_or(0))
        .collect();

    let proj_targets = gaussian(cfg.n_targets, d, 1.0, &mut root.substream("proj", 4));
    let presence = latents.matmul_t(&proj_targets)?.map(|v| f64::from(u8::from(v > 0.0)));
    let target_names: Vec<String> = (0..cfg.n_targets).map(|k| format!("T{k:02}")).collect();
    let mut occurrences = Vec::new();
    for (k, name) in target_names.iter().enumerate() {
        for (i, id) in ids.iter().enumerate() {
            occurrences.push(OccurrenceRecord {
                species_id: name.clone(),
                x: locations[i].0,
                y: locations[i].1,
                label: presence.get(i, k) as u8,
                point_id: id.clone(),
            });
        }
    }

    let proj_soil = gaussian(cfg.soil_groups, d, 1.0, &mut root.substream("proj", 5));
    let mut rng = root.substream("soil", 0);
    let mut abundances = latents.matmul_t(&proj_soil)?.map(softplus);
    for v in abundances.data_mut() {
        *v = *v * (1.0 + 0.1 * rng.normal()).max(0.0) + 1e-6;
    }
    let elevation = (0..n).map(|i| 1500.0 + 500.0 * latents.get(i, 0) + 50.0 * rng.normal()).collect();

    Ok(SyntheticData {
        dataset: PairedDataset {
            ids: ids.clone(),
            locations: locations.clone(),
            cover,
            images,
            owner,
            classes: Some(classes),
        },
        latents,
        species: (0..cfg.n_species).map(|k| format!("S{k:03}")).collect(),
        presence: SiteTable {
            ids: ids.clone(),
            locations: locations.clone(),
            columns: target_names,
            values: presence,
        },
        occurrences,
        soil: TrophicTable {
            sample_ids: ids,
            locations,
            elevation,
            abundances,
        },
        soil_groups: (0..cfg.soil_groups).map(|k| format!("G{k:02}")).collect(),
    })
}

impl SyntheticData {
    /// Image rows carry `<pair>#<view>` ids.
    pub fn image_ids(&self) -> Vec<String> {
        let mut seen = vec![0usize; self.dataset.n_pairs()];
        self.dataset
            .owner
            .iter()
            .map(|&o| {
                seen[o] += 1;
                view_id(&self.dataset.ids[o], seen[o] - 1)
            })
            .collect()
    }

    pub fn cover_table(&self) -> SiteTable {
        SiteTable {
            ids: self.dataset.ids.clone(),
            locations: self.dataset.locations.clone(),
            columns: self.species.clone(),
            values: self.dataset.cover.clone(),
        }
    }

    pub fn latent_table(&self) -> SiteTable {
        SiteTable {
            ids: self.dataset.ids.clone(),
            locations: self.dataset.locations.clone(),
            columns: (0..self.latents.cols()).map(|k| format!("t{k}")).collect(),
            values: self.latents.clone(),
        }
    }
}
