//! File formats, run configuration, provenance manifests and the synthetic
//! data generator.

mod config;
mod embeddings;
mod manifest;
mod synth;
mod tables;

use std::collections::BTreeMap;
use std::path::Path;

pub use config::{DataPaths, RunConfig};
pub use embeddings::{load_embeddings, pair_of, save_embeddings, view_id, EmbeddingFile, EMB_MAGIC, EMB_VERSION};
pub use manifest::{FileDigest, RunManifest};
pub use synth::{generate_synthetic, SynthConfig, SyntheticData};
pub use tables::{
    point_key, read_labels, read_occurrences, read_releves, read_soil, write_labels, write_occurrences, write_soil,
    OccurrenceRecord, SiteTable,
};

use crate::data::PairedDataset;
use crate::error::{Error, Result};

/// For each wanted id, the embedding row named exactly that, or else the
/// first `<id>#<view>` row.
pub fn resolve_rows(wanted: &[String], embedding_ids: &[String]) -> Result<Vec<usize>> {
    let mut exact: BTreeMap<&str, usize> = BTreeMap::new();
    let mut first_view: BTreeMap<&str, usize> = BTreeMap::new();
    for (r, id) in embedding_ids.iter().enumerate() {
        exact.insert(id.as_str(), r);
        first_view.entry(pair_of(id)).or_insert(r);
    }
    wanted
        .iter()
        .map(|w| {
            exact
                .get(w.as_str())
                .or_else(|| first_view.get(w.as_str()))
                .copied()
                .ok_or_else(|| Error::Config(format!("no embedding row for {w:?}")))
        })
        .collect()
}

/// Joins a cover table and an image embedding file (rows named
/// `<plot>#<view>` or `<plot>`), with optional class labels.
pub fn load_paired(
    cover: &Path,
    images: &Path,
    labels: Option<&Path>,
    normalize_on_load: bool,
) -> Result<PairedDataset> {
    let table = SiteTable::read_csv(cover)?;
    let (images_m, ids) = load_embeddings(images, normalize_on_load)?;
    let ids = ids.ok_or_else(|| Error::Config(format!("{}: image file needs row ids", images.display())))?;
    let index = table.index();
    let owner = ids
        .iter()
        .map(|id| {
            index
                .get(pair_of(id))
                .copied()
                .ok_or_else(|| Error::Config(format!("image {id:?} has no relevé in {}", cover.display())))
        })
        .collect::<Result<Vec<_>>>()?;
    let classes = match labels {
        Some(p) => {
            let by_id: BTreeMap<String, usize> = read_labels(p)?.into_iter().collect();
            Some(
                table
                    .ids
                    .iter()
                    .map(|id| {
                        by_id
                            .get(id)
                            .copied()
                            .ok_or_else(|| Error::Config(format!("{}: no label for {id:?}", p.display())))
                    })
                    .collect::<Result<Vec<_>>>()?,
            )
        }
        None => None,
    };
    let ds = PairedDataset {
        ids: table.ids,
        locations: table.locations,
        cover: table.values,
        images: images_m,
        owner,
        classes,
    };
    ds.validate()?;
    Ok(ds)
}

impl SyntheticData {
    /// Writes `cover.csv`, `labels.csv`, `images.emb`, `presence.csv`,
    /// `occurrences.csv`, `soil.csv` and `latents.csv` into `dir`.
    pub fn write_dir(&self, dir: &Path) -> Result<Vec<std::path::PathBuf>> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let p = |name: &str| dir.join(name);
        self.cover_table().write_csv(&p("cover.csv"))?;
        write_labels(
            &self.dataset.ids,
            self.dataset.classes.as_deref().unwrap_or_default(),
            &p("labels.csv"),
        )?;
        save_embeddings(&self.dataset.images, Some(self.image_ids()), &p("images.emb"))?;
        self.presence.write_csv(&p("presence.csv"))?;
        write_occurrences(&self.occurrences, &p("occurrences.csv"))?;
        write_soil(&self.soil, &self.soil_groups, &p("soil.csv"))?;
        self.latent_table().write_csv(&p("latents.csv"))?;
        Ok(["cover.csv", "labels.csv", "images.emb", "presence.csv", "occurrences.csv", "soil.csv", "latents.csv"]
            .iter()
            .map(|n| p(n))
            .collect())
    }
}
