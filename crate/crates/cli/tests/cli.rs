use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use botaclip::encoders::{BotaniaDims, Parameterized};
use botaclip::io::{load_embeddings, save_embeddings, RunManifest, SiteTable};
use botaclip::numerics::l2_normalize_rows;
use botaclip::train::{BotaclipModel, ModelConfig};
use botaclip::{Matrix, Rng};

const SUBCOMMANDS: [&str; 10] = [
    "prep",
    "train-botania",
    "train-botaclip",
    "train-botasp",
    "embed",
    "split",
    "eval",
    "cluster-metrics",
    "stats",
    "synth",
];

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_botaclip"));
    c.env_remove("RA_THREADS");
    c
}

fn run(dir: &Path, args: &[&str]) -> Output {
    bin().current_dir(dir).args(args).output().expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = run(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

/// Exit code plus the parsed JSON error line (last stderr line).
fn failure(dir: &Path, args: &[&str]) -> (i32, serde_json::Value) {
    let out = run(dir, args);
    let stderr = String::from_utf8(out.stderr).unwrap();
    let last = stderr.lines().last().expect("stderr is not empty");
    (out.status.code().unwrap(), serde_json::from_str(last).expect("machine-readable line"))
}

const TINY: &str = r#"{
  "synth": {"pairs": 96, "img_dim": 8, "latent_dim": 4, "n_species": 12, "n_classes": 3, "n_targets": 4, "soil_groups": 3},
  "model": {"botania": {"input": 0, "hidden1": 16, "hidden2": 8, "classes": 3}},
  "botaclip": {"max_epochs": 3, "batch_size": 32},
  "botania": {"max_epochs": 3},
  "botasp": {"max_epochs": 2},
  "botasp_arch": {"hidden": 8},
  "split": {"cell_size": 5000.0, "n_folds": 3},
  "eval": {"repeats": 1, "forest": {"n_trees": 5}, "plant_support": {"min": 2},
           "butterfly_support": {"min": 2, "max": null}, "soil_folds": 3, "soil_strata": 2}
}"#;

fn tiny_workspace() -> (tempfile::TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.json");
    std::fs::write(&cfg, TINY).unwrap();
    ok(dir.path(), &["--config", "tiny.json", "synth", "--out", "data"]);
    (dir, cfg)
}

#[test]
fn help_documents_every_flag() {
    let dir = tempfile::tempdir().unwrap();
    for sub in SUBCOMMANDS {
        let text = ok(dir.path(), &[sub, "--help"]);
        for line in text.lines().map(str::trim).filter(|l| l.starts_with("--")) {
            // `--flag <VALUE>  description`
            let doc = line.split_once("  ").map(|(_, d)| d.trim()).unwrap_or("");
            assert!(!doc.is_empty(), "{sub}: undocumented flag line {line:?}");
        }
    }
    let top = ok(dir.path(), &["--help"]);
    for sub in SUBCOMMANDS {
        assert!(top.contains(sub), "{sub} missing from top-level help");
    }
    assert!(top.contains("RA_THREADS"));
}

#[test]
fn exit_codes_and_error_lines() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let (code, line) = failure(d, &["eval", "--out", "x.csv"]);
    assert_eq!((code, line["error"].as_str()), (1, Some("usage")));
    let (code, _) = failure(d, &["no-such-command"]);
    assert_eq!(code, 1);
    let (code, line) = failure(d, &["--set", "botaclip.lamda=1", "synth", "--out", "s"]);
    assert_eq!(code, 1);
    assert!(line["message"].as_str().unwrap().contains("lamda"));
    let (code, line) = failure(d, &["eval", "--task", "plant", "--out", "x.csv"]);
    assert_eq!(code, 1, "missing input path is a usage error: {line}");
    let (code, line) = failure(d, &["embed", "--checkpoint", "missing.ckpt", "--images", "x.emb", "--out", "y.emb"]);
    assert_eq!((code, line["error"].as_str()), (2, Some("data")));
    assert_eq!(line["exit_code"], 2);
    std::fs::write(d.join("bad.emb"), b"NOPE").unwrap();
    let (code, _) = failure(d, &["cluster-metrics", "--embeddings", "bad.emb", "--labels", "l.csv", "--out", "c.csv"]);
    assert_eq!(code, 2);

    // One cluster: the indices are undefined, a numeric failure.
    let m = Matrix::from_fn(4, 2, |i, j| (i + j) as f64 + 1.0);
    let ids: Vec<String> = (0..4).map(|i| format!("p{i}")).collect();
    save_embeddings(&m, Some(ids.clone()), &d.join("e.emb")).unwrap();
    botaclip::io::write_labels(&ids, &[0, 0, 0, 0], &d.join("l.csv")).unwrap();
    let (code, line) = failure(d, &["cluster-metrics", "--embeddings", "e.emb", "--labels", "l.csv", "--out", "c.csv"]);
    assert_eq!((code, line["error"].as_str()), (3, Some("numeric")));

    let out = bin().current_dir(d).env("RA_THREADS", "0").args(["synth", "--out", "s"]).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn embed_with_identity_adapter_reproduces_normalized_input() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let mut rng = Rng::new(5);
    let raw = Matrix::from_fn(20, 6, |_, _| rng.normal());
    let ids: Vec<String> = (0..20).map(|i| format!("p{i}#0")).collect();
    save_embeddings(&raw, Some(ids.clone()), &d.join("in.emb")).unwrap();
    let cfg = ModelConfig {
        botania: BotaniaDims {
            input: 0,
            hidden1: 4,
            hidden2: 4,
            classes: 2,
        },
        adapter_noise_variance: 0.0,
        ..ModelConfig::default()
    };
    let model = BotaclipModel::new(&cfg, 6, 3, None, &mut Rng::new(1)).unwrap();
    model.to_checkpoint().save(&d.join("id.ckpt")).unwrap();
    ok(d, &["embed", "--checkpoint", "id.ckpt", "--images", "in.emb", "--out", "out.emb"]);
    let (stored, _) = load_embeddings(&d.join("in.emb"), false).unwrap();
    let expected = l2_normalize_rows(&stored).unwrap();
    let (got, got_ids) = load_embeddings(&d.join("out.emb"), false).unwrap();
    assert_eq!(got_ids.unwrap(), ids);
    for (a, b) in got.data().iter().zip(expected.data()) {
        assert!((a - b).abs() < 1e-6, "{a} vs {b}");
    }
    assert!(d.join("out.emb.manifest.json").exists());
}

#[test]
fn stats_on_identical_reports_names_no_winner() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let body = "unit,tss,f1\nA,0.5,0.6\nB,0.25,0.7\nC,0.75,0.1\nD,0.1,0.2\nE,0.3,0.3\n";
    std::fs::write(d.join("first.csv"), body).unwrap();
    std::fs::write(d.join("second.csv"), body).unwrap();
    let stdout = ok(d, &["stats", "first.csv", "second.csv", "--out", "stats.csv"]);
    assert!(stdout.contains("winner: none"));
    let csv = std::fs::read_to_string(d.join("stats.csv")).unwrap();
    let friedman = csv.lines().nth(1).unwrap();
    assert!(friedman.starts_with("friedman,0.0,1.0,"), "{friedman}");
    assert!(friedman.ends_with(",none"));

    let (code, _) = failure(d, &["stats", "first.csv", "first.csv", "--out", "s.csv"]);
    assert_eq!(code, 1, "duplicate model names are rejected");
}

#[test]
fn flags_override_file_and_manifest_records_the_run() {
    let (dir, _) = tiny_workspace();
    let d = dir.path();
    ok(d, &["--config", "tiny.json", "--seed", "7", "--set", "synth.pairs=40", "synth", "--pairs", "30", "--out", "s"]);
    let m = RunManifest::read(&d.join("s/manifest.json")).unwrap();
    assert_eq!(m.seed, 7);
    assert_eq!(m.config.synth.pairs, 30, "flag beats --set");
    assert_eq!(m.config.synth.img_dim, 8, "file beats default");
    assert_eq!(m.config_sha256, m.config.digest());
    assert_eq!(m.outputs.len(), 7);
    assert_eq!(SiteTable::read_csv(&d.join("s/cover.csv")).unwrap().ids.len(), 30);
}

#[test]
fn prep_converts_releves() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(
        d.join("releves.csv"),
        "plot_id,x_m,y_m,prodrome_class,species_id,bb_class\n\
         a,0,0,Fagion,sp2,3\n\
         a,0,0,Fagion,sp1,+\n\
         b,10,5,Alnion,sp1,r\n",
    )
    .unwrap();
    ok(d, &["prep", "--releves", "releves.csv", "--out", "prepped"]);
    let table = SiteTable::read_csv(&d.join("prepped/cover.csv")).unwrap();
    assert_eq!(table.ids, ["a", "b"]);
    assert_eq!(table.columns, ["sp1", "sp2"]);
    assert_eq!(table.values.row(0), [0.5, 37.5]);
    assert_eq!(table.values.row(1), [0.1, 0.0]);
    assert_eq!(table.locations[1], (10.0, 5.0));
    let labels = botaclip::io::read_labels(&d.join("prepped/labels.csv")).unwrap();
    assert_eq!(labels, [("a".to_string(), 1), ("b".to_string(), 0)]);
    let classes = std::fs::read_to_string(d.join("prepped/classes.csv")).unwrap();
    assert_eq!(classes, "class,name\n0,Alnion\n1,Fagion\n");
    assert!(d.join("prepped/manifest.json").exists());
}

#[test]
fn every_command_runs_on_a_tiny_dataset() {
    let (dir, _) = tiny_workspace();
    let d = dir.path();
    let c = ["--config", "tiny.json"];
    let with = |rest: &[&str]| -> Vec<String> { c.iter().chain(rest).map(|s| s.to_string()).collect() };
    let go = |rest: &[&str]| {
        let args = with(rest);
        ok(d, &args.iter().map(String::as_str).collect::<Vec<_>>())
    };
    go(&["split", "--sites", "data/cover.csv", "--out", "split.csv"]);
    go(&[
        "train-botania",
        "--cover",
        "data/cover.csv",
        "--labels",
        "data/labels.csv",
        "--split-manifest",
        "split.csv",
        "--out",
        "bt",
    ]);
    go(&[
        "train-botaclip",
        "--cover",
        "data/cover.csv",
        "--images",
        "data/images.emb",
        "--pretrained",
        "bt/botania.ckpt",
        "--split-manifest",
        "split.csv",
        "--out",
        "bc",
    ]);
    go(&["train-botasp", "--images", "data/images.emb", "--presence", "data/presence.csv", "--out", "sp"]);
    go(&["embed", "--checkpoint", "bc/botaclip.ckpt", "--images", "data/images.emb", "--out", "adapted.emb"]);
    go(&["embed", "--checkpoint", "sp/botasp.ckpt", "--images", "data/images.emb", "--out", "sp.emb"]);
    let (sp, _) = load_embeddings(&d.join("sp.emb"), false).unwrap();
    assert_eq!(sp.cols(), 8, "baseline exports its hidden layer");
    for (task, flag, file) in [
        ("plant", "--presence", "data/presence.csv"),
        ("butterfly", "--occurrences", "data/occurrences.csv"),
        ("soil", "--soil", "data/soil.csv"),
    ] {
        let out = format!("{task}.csv");
        go(&["eval", "--task", task, "--embeddings", "adapted.emb", flag, file, "--out", &out]);
        assert!(d.join(format!("{out}.manifest.json")).exists());
    }
    go(&["eval", "--task", "plant", "--embeddings", "data/images.emb", "--presence", "data/presence.csv", "--out", "raw.csv"]);
    go(&["stats", "plant.csv", "raw.csv", "--out", "stats.csv"]);
    go(&["cluster-metrics", "--embeddings", "adapted.emb", "--labels", "data/labels.csv", "--out", "clusters.csv"]);
    let clusters = std::fs::read_to_string(d.join("clusters.csv")).unwrap();
    assert!(clusters.starts_with("davies_bouldin,calinski_harabasz\n"));

    // A split manifest over other samples is rejected.
    std::fs::write(d.join("other.csv"), "sample_id,cell_ix,cell_iy,fold,role\nzz,0,0,0,validation\n").unwrap();
    let args = with(&[
        "train-botania",
        "--cover",
        "data/cover.csv",
        "--labels",
        "data/labels.csv",
        "--split-manifest",
        "other.csv",
        "--out",
        "bt2",
    ]);
    let (code, _) = failure(d, &args.iter().map(String::as_str).collect::<Vec<_>>());
    assert_eq!(code, 2);
}
