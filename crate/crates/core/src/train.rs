//! Training loops: Botania pretraining, contrastive alignment, and the
//! supervised baseline.
//!
//! All randomness comes from named substreams of the run seed (`"init"`,
//! `"shuffle"`, `"dropout"`), so identical inputs give bit-identical models
//! and logs.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::PairedDataset;
use crate::encoders::{
    BotaniaDims, BotaniaMlp, BotaspModel, Checkpoint, GradientTape, ImageTower, MlpVariantDims, ParamView,
    ParamViewMut, Parameterized, TabTower, Variant, BOTASP_HIDDEN,
};
use crate::error::{Error, Result};
use crate::losses::{
    cross_entropy_grad, BotaclipObjective, BotaspObjective, LossBreakdown, ScalarsTauB, BOTASP_LAMBDA,
    DEFAULT_LAMBDA,
};
use crate::numerics::{Matrix, Rng};
use crate::optim::{AdamWState, EarlyStopping, OptimizerConfig, StopDecision};
use crate::spatial::FoldAssignment;

/// Tolerance for the unit-norm check on tower outputs.
const OUTPUT_NORM_TOL: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub lambda: f64,
    pub seed: u64,
    pub shuffle: bool,
    pub optimizer: OptimizerConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::botaclip()
    }
}

impl TrainConfig {
    /// AdamW 1e-3 / 1e-3, batch 256, up to 1000 epochs, patience 10, λ = 1.
    pub fn botaclip() -> Self {
        Self {
            batch_size: 256,
            max_epochs: 1000,
            patience: 10,
            lambda: DEFAULT_LAMBDA,
            seed: 0,
            shuffle: true,
            optimizer: OptimizerConfig::adamw(1e-3, 1e-3),
        }
    }

    /// Plain Adam at lr 0.3, 300 epochs, patience 20.
    pub fn botania() -> Self {
        Self {
            max_epochs: 300,
            patience: 20,
            lambda: 0.0,
            optimizer: OptimizerConfig::adam(0.3),
            ..Self::botaclip()
        }
    }

    /// AdamW 1e-3 / 1e-3, 200 epochs, λ = 100.
    pub fn botasp() -> Self {
        Self {
            max_epochs: 200,
            lambda: BOTASP_LAMBDA,
            ..Self::botaclip()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.patience == 0 || self.max_epochs == 0 {
            return Err(Error::Config(
                "batch_size, patience and max_epochs must be at least 1".into(),
            ));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("lambda must be finite and ≥ 0, got {}", self.lambda)));
        }
        self.optimizer.validate()
    }
}

/// One epoch of a training log. `scl`/`reg` hold the validation data term
/// (contrastive loss, cross-entropy or BCE) and regularizer.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub scl: f64,
    pub reg: f64,
    pub tau: Option<f64>,
    pub b: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub records: Vec<EpochRecord>,
    /// Epoch of the restored checkpoint.
    pub best_epoch: usize,
    pub stopped_early: bool,
}

impl TrainLog {
    pub fn best(&self) -> Option<&EpochRecord> {
        self.records.iter().find(|r| r.epoch == self.best_epoch)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::io(path, std::io::Error::other(e)))?;
        for r in &self.records {
            w.serialize(r)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    /// Reads records back; `best_epoch` is recomputed as the first minimum.
    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path).map_err(|e| Error::io(path, std::io::Error::other(e)))?;
        let records = r.deserialize().collect::<std::result::Result<Vec<EpochRecord>, _>>()?;
        let best_epoch = records
            .iter()
            .fold(None::<&EpochRecord>, |best, r| match best {
                Some(b) if b.val_loss <= r.val_loss => Some(b),
                _ => Some(r),
            })
            .map_or(0, |r| r.epoch);
        Ok(Self {
            records,
            best_epoch,
            stopped_early: false,
        })
    }
}

/// Architecture settings shared by the alignment variants.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub variant: Variant,
    /// Shared embedding width; the linear variant requires it to equal the
    /// image width. `None` means "image width".
    pub embed_dim: Option<usize>,
    /// Botania widths; `input` is replaced by the data's species count.
    pub botania: BotaniaDims,
    /// Hidden widths of the MLP variant; `tab_hidden` is also the attention
    /// variant's reduced width.
    pub mlp: MlpVariantDims,
    pub adapter_noise_variance: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            variant: Variant::BotaniaLinear,
            embed_dim: None,
            botania: BotaniaDims::default(),
            mlp: MlpVariantDims::default(),
            adapter_noise_variance: 1e-4,
        }
    }
}

/// Image tower, tabular tower and the contrastive scalars.
#[derive(Clone, Debug, PartialEq)]
pub struct BotaclipModel {
    pub image: ImageTower,
    pub tab: TabTower,
    pub scalars: ScalarsTauB,
}

impl BotaclipModel {
    /// `pretrained` holds a Botania checkpoint (`botania.*` blocks) used to
    /// initialize the tabular encoder of the linear variant.
    pub fn new(
        cfg: &ModelConfig,
        img_dim: usize,
        tab_dim: usize,
        pretrained: Option<&Checkpoint>,
        rng: &mut Rng,
    ) -> Result<Self> {
        let embed = cfg.embed_dim.unwrap_or(img_dim);
        let (image, tab) = match cfg.variant {
            Variant::BotaniaLinear => {
                if embed != img_dim {
                    return Err(Error::Config(format!(
                        "linear image adapter is square: embed_dim {embed} ≠ image width {img_dim}"
                    )));
                }
                let image = ImageTower::linear(img_dim, cfg.adapter_noise_variance, rng);
                let tab = match pretrained {
                    Some(ckpt) => {
                        let botania = BotaniaMlp::from_checkpoint(ckpt, "botania")?;
                        if botania.dims().input != tab_dim {
                            return Err(Error::ShapeMismatch(format!(
                                "pretrained Botania expects {} species, data has {tab_dim}",
                                botania.dims().input
                            )));
                        }
                        let mut tab = TabTower::botania(botania.dims(), embed, rng);
                        let renamed = ckpt.reprefix("botania.", "tab.botania.");
                        if let TabTower::Botania { botania, .. } = &mut tab {
                            botania.load_from(&renamed)?;
                        }
                        tab
                    }
                    None => TabTower::botania(
                        BotaniaDims {
                            input: tab_dim,
                            ..cfg.botania
                        },
                        embed,
                        rng,
                    ),
                };
                (image, tab)
            }
            Variant::Mlp => (
                ImageTower::mlp(img_dim, cfg.mlp.img_hidden, embed, rng),
                TabTower::mlp(tab_dim, cfg.mlp.tab_hidden, embed, rng),
            ),
            Variant::Attention => (
                ImageTower::mlp(img_dim, cfg.mlp.img_hidden, embed, rng),
                TabTower::attention(tab_dim, cfg.mlp.tab_hidden, embed, rng)?,
            ),
        };
        Ok(Self {
            image,
            tab,
            scalars: ScalarsTauB::default(),
        })
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let mut scalars = ScalarsTauB::default();
        scalars.load_from(ckpt)?;
        Ok(Self {
            image: ImageTower::from_checkpoint(ckpt)?,
            tab: TabTower::from_checkpoint(ckpt)?,
            scalars,
        })
    }

    pub fn variant(&self) -> Variant {
        self.tab.variant()
    }

    /// Adapted image embeddings (eval mode).
    pub fn embed_images(&self, images: &Matrix) -> Result<Matrix> {
        self.image.infer(images)
    }

    pub fn embed_cover(&self, cover: &Matrix) -> Result<Matrix> {
        self.tab.infer(cover)
    }

    /// Contrastive objective on one batch in eval mode.
    pub fn evaluate(&self, images: &Matrix, cover: &Matrix, lambda: f64) -> Result<LossBreakdown> {
        let z_img = self.image.infer(images)?;
        let z_tab = self.tab.infer(cover)?;
        BotaclipObjective::new().forward(images, &z_img, &z_tab, &self.scalars, lambda)
    }
}

impl Parameterized for BotaclipModel {
    fn params(&self) -> Vec<ParamView<'_>> {
        let mut p = self.image.params();
        p.extend(self.tab.params());
        p.extend(self.scalars.params());
        p
    }

    fn params_mut(&mut self) -> Vec<ParamViewMut<'_>> {
        let mut p = self.image.params_mut();
        p.extend(self.tab.params_mut());
        p.extend(self.scalars.params_mut());
        p
    }
}

fn check_unit_rows(m: &Matrix, what: &str) -> Result<()> {
    match m.row_norms().into_iter().enumerate().find(|(_, n)| (n - 1.0).abs() > OUTPUT_NORM_TOL) {
        Some((row, norm)) => Err(Error::NonFinite(format!("{what} output row {row} has norm {norm}"))),
        None => Ok(()),
    }
}

fn ensure_finite(value: f64, what: &str) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(Error::NonFinite(format!("{what} = {value}")))
    }
}

fn batches(order: &[usize], size: usize) -> impl Iterator<Item = &[usize]> {
    order.chunks(size)
}

fn epoch_order(n: usize, cfg: &TrainConfig, root: &Rng, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    if cfg.shuffle {
        root.substream("shuffle", epoch as u64).shuffle(&mut order);
    }
    order
}

/// Weighted running mean over batches.
#[derive(Default)]
struct Mean {
    sum: f64,
    weight: f64,
}

impl Mean {
    fn add(&mut self, v: f64, w: usize) {
        self.sum += v * w as f64;
        self.weight += w as f64;
    }

    fn get(&self) -> f64 {
        self.sum / self.weight
    }
}

/// Shared epoch/early-stopping driver. `run_epoch` trains one epoch and
/// returns the mean training loss; `validate` returns the validation losses.
fn drive<M: Clone>(
    model: &mut M,
    cfg: &TrainConfig,
    mut run_epoch: impl FnMut(&mut M, usize) -> Result<f64>,
    mut validate: impl FnMut(&M) -> Result<LossBreakdown>,
    scalars: impl Fn(&M) -> Option<ScalarsTauB>,
) -> Result<TrainLog> {
    let mut stopper = EarlyStopping::new(cfg.patience)?;
    let mut log = TrainLog::default();
    let mut best = model.clone();
    for epoch in 1..=cfg.max_epochs {
        let train_loss = ensure_finite(run_epoch(model, epoch)?, "training loss")?;
        let val = validate(model)?;
        ensure_finite(val.total, "validation loss")?;
        let s = scalars(model);
        log.records.push(EpochRecord {
            epoch,
            train_loss,
            val_loss: val.total,
            scl: val.data_term,
            reg: val.reg,
            tau: s.map(|s| s.tau),
            b: s.map(|s| s.b),
        });
        match stopper.observe(val.total) {
            StopDecision::Continue { improved: true } => best = model.clone(),
            StopDecision::Continue { improved: false } => {}
            StopDecision::Stop => {
                log.stopped_early = true;
                break;
            }
        }
    }
    log.best_epoch = stopper.best_epoch();
    *model = best;
    Ok(log)
}

/// Trains the Botania classifier on `train` rows, early-stopping on the
/// mean validation cross-entropy.
pub fn train_botania(
    cover: &Matrix,
    labels: &[usize],
    train: &[usize],
    val: &[usize],
    dims: BotaniaDims,
    cfg: &TrainConfig,
) -> Result<(BotaniaMlp, TrainLog)> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::EmptySplit("train"));
    }
    if val.is_empty() {
        return Err(Error::EmptySplit("validation"));
    }
    if labels.len() != cover.rows() {
        return Err(Error::ShapeMismatch(format!("{} labels for {} rows", labels.len(), cover.rows())));
    }
    let dims = BotaniaDims {
        input: cover.cols(),
        ..dims
    };
    if let Some(&bad) = labels.iter().find(|&&l| l >= dims.classes) {
        return Err(Error::BadLabel {
            label: bad,
            classes: dims.classes,
        });
    }
    let root = Rng::new(cfg.seed);
    let mut model = BotaniaMlp::new("botania", dims, &mut root.substream("init", 0));
    let mut opt = AdamWState::new(cfg.optimizer)?;
    let x_val = cover.select_rows(val);
    let y_val: Vec<usize> = val.iter().map(|&i| labels[i]).collect();
    let mut step = 0u64;
    let log = drive(
        &mut model,
        cfg,
        |model, epoch| {
            let order = epoch_order(train.len(), cfg, &root, epoch);
            let mut mean = Mean::default();
            for batch in batches(&order, cfg.batch_size) {
                let rows: Vec<usize> = batch.iter().map(|&k| train[k]).collect();
                let x = cover.select_rows(&rows);
                let y: Vec<usize> = rows.iter().map(|&i| labels[i]).collect();
                step += 1;
                let mut rng = root.substream("dropout", step);
                let logits = model.forward_logits(&x, Some(&mut rng))?;
                let (loss, d_logits) = cross_entropy_grad(&logits, &y)?;
                let mut tape = GradientTape::new();
                model.backward_params(Some(&d_logits), None, &mut tape)?;
                opt.step(model, &tape)?;
                mean.add(loss, rows.len());
            }
            Ok(mean.get())
        },
        |model| {
            let (loss, _) = cross_entropy_grad(&model.infer_logits(&x_val)?, &y_val)?;
            Ok(LossBreakdown {
                total: loss,
                data_term: loss,
                reg: 0.0,
            })
        },
        |_| None,
    )?;
    Ok((model, log))
}

/// Fraction of rows whose true label is among the `k` highest logits.
pub fn top_k_accuracy(logits: &Matrix, labels: &[usize], k: usize) -> Result<f64> {
    if labels.len() != logits.rows() || labels.is_empty() {
        return Err(Error::ShapeMismatch(format!("{} labels for {} rows", labels.len(), logits.rows())));
    }
    let hits = labels
        .iter()
        .enumerate()
        .filter(|&(i, &y)| {
            let row = logits.row(i);
            let above = row.iter().filter(|&&v| v > row[y]).count();
            above < k
        })
        .count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Contrastive alignment of the two towers.
///
/// Training pairs are every image view of every training relevé; the
/// validation loss uses the first view of each validation relevé. Image
/// embeddings are read-only inputs and must be unit-norm.
pub fn train_botaclip(
    data: &PairedDataset,
    split: &FoldAssignment,
    cfg: &TrainConfig,
    model_cfg: &ModelConfig,
    pretrained: Option<&Checkpoint>,
) -> Result<(BotaclipModel, TrainLog)> {
    cfg.validate()?;
    data.validate()?;
    if split.len() != data.n_pairs() {
        return Err(Error::ShapeMismatch(format!(
            "split covers {} samples, dataset has {}",
            split.len(),
            data.n_pairs()
        )));
    }
    let train_pairs = split.train();
    let val_pairs = split.validation();
    if train_pairs.is_empty() {
        return Err(Error::EmptySplit("train"));
    }
    if val_pairs.is_empty() {
        return Err(Error::EmptySplit("validation"));
    }
    split.check_train_indices(&train_pairs)?;

    let root = Rng::new(cfg.seed);
    let mut model = BotaclipModel::new(
        model_cfg,
        data.images.cols(),
        data.cover.cols(),
        pretrained,
        &mut root.substream("init", 0),
    )?;
    let mut opt = AdamWState::new(cfg.optimizer)?;
    opt.exclude_from_decay("tau");
    opt.exclude_from_decay("b");

    let train_rows = data.expand(&train_pairs);
    let val_rows = data.first_views(&val_pairs);
    let val_img = data.images.select_rows(&val_rows);
    let val_cover = data.cover.select_rows(&val_pairs);
    let mut step = 0u64;
    let log = drive(
        &mut model,
        cfg,
        |model, epoch| {
            let order = epoch_order(train_rows.len(), cfg, &root, epoch);
            let mut mean = Mean::default();
            let mut objective = BotaclipObjective::new();
            for batch in batches(&order, cfg.batch_size) {
                let rows: Vec<usize> = batch.iter().map(|&k| train_rows[k]).collect();
                let owners: Vec<usize> = rows.iter().map(|&r| data.owner[r]).collect();
                let img = data.images.select_rows(&rows);
                let cover = data.cover.select_rows(&owners);
                step += 1;
                let mut rng = root.substream("dropout", step);
                let z_img = model.image.forward(&img, Some(&mut rng))?;
                let z_tab = model.tab.forward(&cover, Some(&mut rng))?;
                check_unit_rows(&z_img, "image tower")?;
                check_unit_rows(&z_tab, "tabular tower")?;
                let loss = objective.forward(&img, &z_img, &z_tab, &model.scalars, cfg.lambda)?;
                let grads = objective.backward()?;
                let mut tape = grads.scalars;
                model.image.backward(&grads.d_z_img, &mut tape)?;
                model.tab.backward(&grads.d_z_tab, &mut tape)?;
                opt.step(model, &tape)?;
                model.scalars.clamp();
                mean.add(loss.total, rows.len());
            }
            Ok(mean.get())
        },
        |model| validate_botaclip(model, &val_img, &val_cover, cfg.batch_size, cfg.lambda),
        |model| Some(model.scalars),
    )?;
    Ok((model, log))
}

/// Batched validation loss, dropout off, weighted by batch size.
fn validate_botaclip(
    model: &BotaclipModel,
    img: &Matrix,
    cover: &Matrix,
    batch_size: usize,
    lambda: f64,
) -> Result<LossBreakdown> {
    let order: Vec<usize> = (0..img.rows()).collect();
    let (mut total, mut scl, mut reg) = (Mean::default(), Mean::default(), Mean::default());
    for batch in batches(&order, batch_size) {
        let l = model.evaluate(&img.select_rows(batch), &cover.select_rows(batch), lambda)?;
        total.add(l.total, batch.len());
        scl.add(l.data_term, batch.len());
        reg.add(l.reg, batch.len());
    }
    Ok(LossBreakdown {
        total: total.get(),
        data_term: scl.get(),
        reg: reg.get(),
    })
}

/// Widths of the supervised baseline.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BotaspConfig {
    pub hidden: usize,
    pub projection_noise_variance: f64,
}

impl Default for BotaspConfig {
    fn default() -> Self {
        Self {
            hidden: BOTASP_HIDDEN,
            projection_noise_variance: 1e-4,
        }
    }
}

/// Supervised baseline on frozen unit-norm embeddings and per-species
/// presence targets.
pub fn train_botasp(
    embeddings: &Matrix,
    presence: &Matrix,
    train: &[usize],
    val: &[usize],
    arch: &BotaspConfig,
    cfg: &TrainConfig,
) -> Result<(BotaspModel, TrainLog)> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::EmptySplit("train"));
    }
    if val.is_empty() {
        return Err(Error::EmptySplit("validation"));
    }
    if embeddings.rows() != presence.rows() {
        return Err(Error::ShapeMismatch(format!(
            "{} embeddings, {} target rows",
            embeddings.rows(),
            presence.rows()
        )));
    }
    let root = Rng::new(cfg.seed);
    let mut model = BotaspModel::new(
        embeddings.cols(),
        arch.hidden,
        presence.cols(),
        arch.projection_noise_variance,
        &mut root.substream("init", 0),
    );
    let mut opt = AdamWState::new(cfg.optimizer)?;
    let x_val = embeddings.select_rows(val);
    let y_val = presence.select_rows(val);
    let mut step = 0u64;
    let log = drive(
        &mut model,
        cfg,
        |model, epoch| {
            let order = epoch_order(train.len(), cfg, &root, epoch);
            let mut mean = Mean::default();
            let mut objective = BotaspObjective::new();
            for batch in batches(&order, cfg.batch_size) {
                let rows: Vec<usize> = batch.iter().map(|&k| train[k]).collect();
                let x = embeddings.select_rows(&rows);
                let y = presence.select_rows(&rows);
                step += 1;
                let mut rng = root.substream("dropout", step);
                let out = model.forward(&x, Some(&mut rng))?;
                let loss = objective.forward(&out.logits, &y, &x, &out.projected, cfg.lambda)?;
                let g = objective.backward()?;
                let mut tape = GradientTape::new();
                model.backward(&g.d_logits, &g.d_z_new, &mut tape)?;
                opt.step(model, &tape)?;
                mean.add(loss.total, rows.len());
            }
            Ok(mean.get())
        },
        |model| {
            let out = model.infer(&x_val)?;
            BotaspObjective::new().forward(&out.logits, &y_val, &x_val, &out.projected, cfg.lambda)
        },
        |_| None,
    )?;
    Ok((model, log))
}
