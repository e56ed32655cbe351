//! One function per subcommand. Each resolves its inputs (flag, then
//! configuration), does the work and writes a manifest next to its output.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use botaclip::data::{binarize_presence, build_cover_matrix, normalize_soil};
use botaclip::encoders::{BotaniaDims, BotaspModel, Checkpoint, Parameterized};
use botaclip::eval::{butterfly_task, plant_task, soil_task, OccurrenceData};
use botaclip::io::{
    generate_synthetic, load_embeddings, load_paired, read_labels, read_occurrences, read_releves, read_soil,
    resolve_rows, save_embeddings, write_labels, RunConfig, RunManifest, SiteTable,
};
use botaclip::metrics::{ablation_report, cluster_indices, collect_scores, MetricReport};
use botaclip::spatial::FoldAssignment;
use botaclip::train::{train_botaclip, train_botania, train_botasp, BotaclipModel, TrainLog};
use botaclip::{Error, Result, Rng};

use crate::{overrides, Cli, Command, TaskArg};

pub fn run(cli: Cli) -> Result<()> {
    let g = cli.global;
    if let Some(n) = g.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(usize::from(n))
            .build_global()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    }
    let mut cfg = overrides::build_config(g.config.as_deref(), &g.sets, g.seed)?;
    match cli.command {
        Command::Prep { releves, out } => {
            set(&mut cfg.data.releves, releves);
            prep(&cfg, &out)
        }
        Command::TrainBotania {
            cover,
            labels,
            split,
            out,
        } => {
            set(&mut cfg.data.cover, cover);
            set(&mut cfg.data.labels, labels);
            set(&mut cfg.data.split_manifest, split.split_manifest);
            botania(&cfg, &out)
        }
        Command::TrainBotaclip {
            cover,
            images,
            pretrained,
            split,
            out,
        } => {
            set(&mut cfg.data.cover, cover);
            set(&mut cfg.data.images, images);
            set(&mut cfg.data.pretrained, pretrained);
            set(&mut cfg.data.split_manifest, split.split_manifest);
            botaclip_train(&cfg, &out)
        }
        Command::TrainBotasp {
            images,
            presence,
            split,
            out,
        } => {
            set(&mut cfg.data.images, images);
            set(&mut cfg.data.presence, presence);
            set(&mut cfg.data.split_manifest, split.split_manifest);
            botasp(&cfg, &out)
        }
        Command::Embed { checkpoint, images, out } => {
            set(&mut cfg.data.checkpoint, checkpoint);
            set(&mut cfg.data.images, images);
            embed(&cfg, &out)
        }
        Command::Split { sites, out } => {
            set(&mut cfg.data.cover, sites);
            split(&cfg, &out)
        }
        Command::Eval {
            task,
            embeddings,
            presence,
            occurrences,
            soil,
            split,
            out,
        } => {
            set(&mut cfg.data.embeddings, embeddings);
            set(&mut cfg.data.presence, presence);
            set(&mut cfg.data.occurrences, occurrences);
            set(&mut cfg.data.soil, soil);
            set(&mut cfg.data.split_manifest, split.split_manifest);
            eval(&cfg, task, &out)
        }
        Command::ClusterMetrics { embeddings, labels, out } => {
            set(&mut cfg.data.embeddings, embeddings);
            set(&mut cfg.data.labels, labels);
            cluster(&cfg, &out)
        }
        Command::Stats { reports, metric, out } => stats(&cfg, &reports, metric.as_deref(), &out),
        Command::Synth { pairs, img_dim, out } => {
            if let Some(p) = pairs {
                cfg.synth.pairs = p;
            }
            if let Some(d) = img_dim {
                cfg.synth.img_dim = d;
            }
            synth(&cfg, &out)
        }
    }
}

fn set(slot: &mut Option<PathBuf>, flag: Option<PathBuf>) {
    if flag.is_some() {
        *slot = flag;
    }
}

fn need<'a>(path: &'a Option<PathBuf>, what: &str) -> Result<&'a Path> {
    path.as_deref()
        .ok_or_else(|| Error::Config(format!("missing input: pass --{what} or set data.{}", what.replace('-', "_"))))
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// `<dir>/manifest.json` for directory outputs, `<file>.manifest.json` otherwise.
fn manifest_path(out: &Path, is_dir: bool) -> PathBuf {
    if is_dir {
        out.join("manifest.json")
    } else {
        let mut name = out.file_name().unwrap_or_default().to_os_string();
        name.push(".manifest.json");
        out.with_file_name(name)
    }
}

fn finish(mut m: RunManifest, inputs: &[&Path], outputs: &[PathBuf], manifest: PathBuf) -> Result<()> {
    for p in inputs {
        m.input(p)?;
    }
    for p in outputs {
        m.output(p)?;
        println!("wrote {}", p.display());
    }
    m.write(&manifest)
}

/// The split named in the configuration, or a fresh buffered split of
/// `locations` drawn from the run seed.
fn split_for(cfg: &RunConfig, ids: &[String], locations: &[(f64, f64)]) -> Result<FoldAssignment> {
    match &cfg.data.split_manifest {
        Some(p) => {
            let (manifest_ids, split) = FoldAssignment::read_manifest(p, cfg.split.cell_size)?;
            if manifest_ids != ids {
                return Err(Error::ShapeMismatch(format!(
                    "{}: sample ids differ from the input table",
                    p.display()
                )));
            }
            Ok(split)
        }
        None => FoldAssignment::build(locations, &cfg.split, &mut Rng::new(cfg.seed).substream("split", 0)),
    }
}

fn split_inputs(cfg: &RunConfig) -> Vec<&Path> {
    cfg.data.split_manifest.as_deref().into_iter().collect()
}

fn prep(cfg: &RunConfig, out: &Path) -> Result<()> {
    let releves_path = need(&cfg.data.releves, "releves")?;
    let (releves, class_names) = read_releves(releves_path)?;
    let species: Vec<String> = releves
        .iter()
        .flat_map(|r| r.species_covers.iter().map(|(s, _)| s.clone()))
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let (cover, classes) = build_cover_matrix(&releves, &species, &cfg.cover_scale)?;
    create_dir(out)?;
    let table = SiteTable {
        ids: cover.plots,
        locations: releves.iter().map(|r| r.location).collect(),
        columns: cover.species,
        values: cover.values,
    };
    let paths = [out.join("cover.csv"), out.join("labels.csv"), out.join("classes.csv")];
    table.write_csv(&paths[0])?;
    write_labels(&table.ids, &classes, &paths[1])?;
    let names = class_names
        .iter()
        .enumerate()
        .fold(String::from("class,name\n"), |s, (i, n)| s + &format!("{i},{}\n", quote(n)));
    std::fs::write(&paths[2], names).map_err(|e| Error::io(&paths[2], e))?;
    finish(RunManifest::new("prep", cfg), &[releves_path], &paths, manifest_path(out, true))
}

fn quote(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_owned()
    }
}

fn write_model(out: &Path, name: &str, ckpt: &Checkpoint, log: &TrainLog) -> Result<[PathBuf; 2]> {
    create_dir(out)?;
    let paths = [out.join(format!("{name}.ckpt")), out.join(format!("{name}_log.csv"))];
    ckpt.save(&paths[0])?;
    log.write_csv(&paths[1])?;
    println!(
        "{name}: best epoch {} of {}{}",
        log.best_epoch,
        log.records.len(),
        if log.stopped_early { " (early stop)" } else { "" }
    );
    Ok(paths)
}

fn botania(cfg: &RunConfig, out: &Path) -> Result<()> {
    let cover_path = need(&cfg.data.cover, "cover")?;
    let labels_path = need(&cfg.data.labels, "labels")?;
    let table = SiteTable::read_csv(cover_path)?;
    let index = table.index();
    let mut labels = vec![None; table.ids.len()];
    for (id, c) in read_labels(labels_path)? {
        if let Some(&row) = index.get(id.as_str()) {
            labels[row] = Some(c);
        }
    }
    let labels = labels
        .into_iter()
        .zip(&table.ids)
        .map(|(l, id)| l.ok_or_else(|| Error::Config(format!("{}: no label for {id:?}", labels_path.display()))))
        .collect::<Result<Vec<_>>>()?;
    let split = split_for(cfg, &table.ids, &table.locations)?;
    let dims = BotaniaDims {
        input: table.columns.len(),
        classes: labels.iter().max().map_or(0, |m| m + 1),
        ..cfg.model.botania
    };
    let (model, log) = train_botania(
        &table.values,
        &labels,
        &split.train(),
        &split.validation(),
        dims,
        &cfg.resolved().botania,
    )?;
    let outputs = write_model(out, "botania", &model.to_checkpoint(), &log)?;
    let mut inputs = vec![cover_path, labels_path];
    inputs.extend(split_inputs(cfg));
    finish(RunManifest::new("train-botania", cfg), &inputs, &outputs, manifest_path(out, true))
}

fn botaclip_train(cfg: &RunConfig, out: &Path) -> Result<()> {
    let cover_path = need(&cfg.data.cover, "cover")?;
    let images_path = need(&cfg.data.images, "images")?;
    let data = load_paired(cover_path, images_path, None, cfg.normalize_on_load)?;
    let split = split_for(cfg, &data.ids, &data.locations)?;
    let pretrained = cfg.data.pretrained.as_deref().map(Checkpoint::load).transpose()?;
    let (model, log) = train_botaclip(&data, &split, &cfg.resolved().botaclip, &cfg.model, pretrained.as_ref())?;
    let outputs = write_model(out, "botaclip", &model.to_checkpoint(), &log)?;
    let mut inputs = vec![cover_path, images_path];
    inputs.extend(cfg.data.pretrained.as_deref());
    inputs.extend(split_inputs(cfg));
    finish(RunManifest::new("train-botaclip", cfg), &inputs, &outputs, manifest_path(out, true))
}

/// Embedding rows matched to `ids` (exact id, else the first view).
fn embeddings_for(path: &Path, ids: &[String], normalize: bool) -> Result<botaclip::Matrix> {
    let (m, emb_ids) = load_embeddings(path, normalize)?;
    let emb_ids = emb_ids.ok_or_else(|| Error::Config(format!("{}: embedding file needs row ids", path.display())))?;
    Ok(m.select_rows(&resolve_rows(ids, &emb_ids)?))
}

fn botasp(cfg: &RunConfig, out: &Path) -> Result<()> {
    let images_path = need(&cfg.data.images, "images")?;
    let presence_path = need(&cfg.data.presence, "presence")?;
    let table = SiteTable::read_csv(presence_path)?;
    let emb = embeddings_for(images_path, &table.ids, cfg.normalize_on_load)?;
    let split = split_for(cfg, &table.ids, &table.locations)?;
    let (model, log) = train_botasp(
        &emb,
        &binarize_presence(&table.values),
        &split.train(),
        &split.validation(),
        &cfg.botasp_arch,
        &cfg.resolved().botasp,
    )?;
    let outputs = write_model(out, "botasp", &model.to_checkpoint(), &log)?;
    let mut inputs = vec![images_path, presence_path];
    inputs.extend(split_inputs(cfg));
    finish(RunManifest::new("train-botasp", cfg), &inputs, &outputs, manifest_path(out, true))
}

fn embed(cfg: &RunConfig, out: &Path) -> Result<()> {
    let ckpt_path = need(&cfg.data.checkpoint, "checkpoint")?;
    let images_path = need(&cfg.data.images, "images")?;
    let ckpt = Checkpoint::load(ckpt_path)?;
    let (images, ids) = load_embeddings(images_path, cfg.normalize_on_load)?;
    let adapted = if ckpt.get("sp.proj.weight").is_some() {
        BotaspModel::from_checkpoint(&ckpt)?.features(&images)?
    } else {
        BotaclipModel::from_checkpoint(&ckpt)?.embed_images(&images)?
    };
    save_embeddings(&adapted, ids, out)?;
    finish(
        RunManifest::new("embed", cfg),
        &[ckpt_path, images_path],
        &[out.to_path_buf()],
        manifest_path(out, false),
    )
}

fn split(cfg: &RunConfig, out: &Path) -> Result<()> {
    let sites = need(&cfg.data.cover, "sites")?;
    let table = SiteTable::read_csv(sites)?;
    let split = FoldAssignment::build(&table.locations, &cfg.split, &mut Rng::new(cfg.seed).substream("split", 0))?;
    split.verify_exhaustive(&table.locations)?;
    split.write_manifest(&table.ids, out)?;
    println!(
        "train {} validation {} excluded {}",
        split.train().len(),
        split.validation().len(),
        split.excluded().len()
    );
    finish(RunManifest::new("split", cfg), &[sites], &[out.to_path_buf()], manifest_path(out, false))
}

fn eval(cfg: &RunConfig, task: TaskArg, out: &Path) -> Result<()> {
    let emb_path = need(&cfg.data.embeddings, "embeddings")?;
    let model = out
        .file_stem()
        .and_then(|s| s.to_str())
        .ok_or_else(|| Error::Config(format!("{}: output needs a file name", out.display())))?;
    let rc = cfg.resolved();
    let (report, mut inputs) = match task {
        TaskArg::Plant => {
            let p = need(&cfg.data.presence, "presence")?;
            let table = SiteTable::read_csv(p)?;
            let emb = embeddings_for(emb_path, &table.ids, cfg.normalize_on_load)?;
            let split = split_for(cfg, &table.ids, &table.locations)?;
            let presence = binarize_presence(&table.values);
            let r = plant_task(model, &emb, &presence, &table.columns, &split, &rc.eval, cfg.seed)?;
            let mut inputs = vec![p];
            inputs.extend(split_inputs(cfg));
            (r, inputs)
        }
        TaskArg::Butterfly => {
            let p = need(&cfg.data.occurrences, "occurrences")?;
            let (occ, point_ids) = OccurrenceData::from_records(&read_occurrences(p)?);
            let emb = embeddings_for(emb_path, &point_ids, cfg.normalize_on_load)?;
            (butterfly_task(model, &emb, &occ, &rc.eval, cfg.seed)?, vec![p])
        }
        TaskArg::Soil => {
            let p = need(&cfg.data.soil, "soil")?;
            let (raw, groups) = read_soil(p)?;
            let table = normalize_soil(&raw)?;
            let emb = embeddings_for(emb_path, &table.sample_ids, cfg.normalize_on_load)?;
            (soil_task(model, &emb, &table, &groups, &rc.eval, cfg.seed)?, vec![p])
        }
    };
    if report.units.is_empty() {
        eprintln!("warning: no unit passed the support filters; the report is empty");
    }
    report.write_csv(out)?;
    print!("{}", report.pretty());
    inputs.insert(0, emb_path);
    let name = format!("eval-{}", format!("{task:?}").to_lowercase());
    finish(RunManifest::new(&name, cfg), &inputs, &[out.to_path_buf()], manifest_path(out, false))
}

fn cluster(cfg: &RunConfig, out: &Path) -> Result<()> {
    let emb_path = need(&cfg.data.embeddings, "embeddings")?;
    let labels_path = need(&cfg.data.labels, "labels")?;
    let (ids, labels): (Vec<String>, Vec<usize>) = read_labels(labels_path)?.into_iter().unzip();
    let emb = embeddings_for(emb_path, &ids, cfg.normalize_on_load)?;
    let c = cluster_indices(&emb, &labels)?;
    let text = format!(
        "davies_bouldin,calinski_harabasz\n{},{}\n",
        botaclip::metrics::format_f64(c.davies_bouldin),
        botaclip::metrics::format_f64(c.calinski_harabasz)
    );
    std::fs::write(out, text).map_err(|e| Error::io(out, e))?;
    println!(
        "Davies-Bouldin {:.4}  Calinski-Harabasz {:.4}",
        c.davies_bouldin, c.calinski_harabasz
    );
    finish(
        RunManifest::new("cluster-metrics", cfg),
        &[emb_path, labels_path],
        &[out.to_path_buf()],
        manifest_path(out, false),
    )
}

fn stats(cfg: &RunConfig, reports: &[PathBuf], metric: Option<&str>, out: &Path) -> Result<()> {
    let loaded = reports
        .iter()
        .map(|p| MetricReport::read_csv(p))
        .collect::<Result<Vec<_>>>()?;
    let names: BTreeSet<&str> = loaded.iter().map(|r| r.model.as_str()).collect();
    if names.len() != loaded.len() {
        return Err(Error::Config("report file stems name the models and must be distinct".into()));
    }
    let metric = match metric {
        Some(m) => m.to_owned(),
        None => loaded[0]
            .metrics
            .first()
            .cloned()
            .ok_or_else(|| Error::Config("reports have no metric columns".into()))?,
    };
    let (models, _units, scores) = collect_scores(&loaded, &metric)?;
    let report = ablation_report(&models, &scores, &metric, &cfg.stats)?;
    std::fs::write(out, report.to_csv()?).map_err(|e| Error::io(out, e))?;
    print!("{}", report.pretty());
    let inputs: Vec<&Path> = reports.iter().map(PathBuf::as_path).collect();
    finish(RunManifest::new("stats", cfg), &inputs, &[out.to_path_buf()], manifest_path(out, false))
}

fn synth(cfg: &RunConfig, out: &Path) -> Result<()> {
    let data = generate_synthetic(&cfg.resolved().synth)?;
    let outputs = data.write_dir(out)?;
    finish(RunManifest::new("synth", cfg), &[], &outputs, manifest_path(out, true))
}
