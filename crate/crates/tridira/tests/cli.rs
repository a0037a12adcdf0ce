//! End-to-end behaviour of the command-line tool on tiny synthetic data.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use clap::Parser;
use tridira::checkpoint::{load_checkpoint, save_checkpoint};
use tridira::cli::{run, Cli};
use tridira::experiment::{fingerprint, render_config};
use tridira::manifest::{write_manifest, ManifestEntry};
use tridira::report::{read_metrics, UNTRAINED_BANNER};
use tridira::tdrf::write_feature_file;
use tridira_core::config::{DatasetConfig, ExperimentConfig, PerEncoder, WeightGrid};
use tridira_core::data::{DatasetSchema, FeatureSequence};
use tridira_core::metrics::MetricReport;
use tridira_core::model::Model;
use tridira_core::optim::AdamW;
use tridira_core::trainer::{Checkpoint, RngState, Stage};
use tridira_core::{Matrix, Modality, ParamStore, Task};

fn small_config() -> ExperimentConfig {
    let mut c = ExperimentConfig::preset("synthetic").unwrap();
    if let DatasetConfig::Synthetic { spec, splits } = &mut c.dataset {
        spec.num_samples = 90;
        spec.seq_lengths = [3, 2, 3];
        spec.feature_dims = [6, 4, 5];
        splits.train = 60;
        splits.valid = 15;
        splits.test = 15;
    }
    let enc = &mut c.model.encoder;
    enc.d_model = 8;
    enc.layers = PerEncoder { text: 1, audio: 1, visual: 1, shared: 1 };
    enc.heads = PerEncoder { text: 2, audio: 2, visual: 2, shared: 2 };
    c.model.fusion.heads = 2;
    c.train.stage1_epochs = 1;
    c.train.stage2_epochs = 2;
    c.train.batch_size = 16;
    c.train.seeds = vec![1, 2];
    c.probe.epochs = 3;
    c.output_dir = "unused-output-dir".into();
    c
}

fn write_config(dir: &Path, name: &str, c: &ExperimentConfig) -> String {
    let path = dir.join(name);
    fs::write(&path, render_config(c)).unwrap();
    path.to_string_lossy().into_owned()
}

/// Runs the CLI in-process and returns what it printed.
fn cli(args: &[&str]) -> anyhow::Result<String> {
    let parsed = Cli::try_parse_from(std::iter::once("tridira").chain(args.iter().copied()))?;
    let mut out = Vec::new();
    run(parsed, &mut out)?;
    Ok(String::from_utf8(out).unwrap())
}

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_tridira"));
    c.env_remove("TRIDIRA_OUT");
    c
}

fn tree(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in fs::read_dir(&dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn synth_is_reproducible_and_refuses_to_overwrite() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "c.toml", &small_config());
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    let printed = cli(&["synth", "--config", &cfg, "--out", s(&a)]).unwrap();
    assert!(printed.contains("latent log:"), "{printed}");
    cli(&["synth", "--config", &cfg, "--out", s(&b)]).unwrap();
    let (ta, tb) = (tree(&a.join("data")), tree(&b.join("data")));
    assert_eq!(ta, tb);
    // header plus one line per record
    let lines = |n: &str| String::from_utf8(ta[Path::new(n)].clone()).unwrap().lines().count();
    assert_eq!((lines("train.manifest"), lines("valid.manifest"), lines("test.manifest")), (61, 16, 16));
    assert_eq!(ta.keys().filter(|p| p.starts_with("features")).count(), 90 * 3);

    let err = cli(&["synth", "--config", &cfg, "--out", s(&a)]).unwrap_err();
    assert!(format!("{err:#}").contains("--force"), "{err:#}");
    cli(&["synth", "--config", &cfg, "--out", s(&a), "--force", "--seed", "99"]).unwrap();
    assert_ne!(tree(&a.join("data")), tb);
}

#[test]
fn invalid_dimensions_exit_nonzero_without_output() {
    let tmp = tempfile::tempdir().unwrap();
    let mut c = small_config();
    if let DatasetConfig::Synthetic { spec, .. } = &mut c.dataset {
        spec.feature_dims = [6, 0, 5];
    }
    let cfg = write_config(tmp.path(), "c.toml", &c);
    let out = tmp.path().join("out");
    let res = bin().args(["synth", "--config", &cfg, "--out", s(&out)]).output().unwrap();
    assert!(!res.status.success());
    let stderr = String::from_utf8_lossy(&res.stderr);
    assert!(stderr.contains("audio feature dimension must be positive"), "{stderr}");
    assert!(!out.exists());
}

#[test]
fn invalid_configuration_never_creates_files() {
    let tmp = tempfile::tempdir().unwrap();
    let mut c = small_config();
    c.train.batch_size = 0;
    c.sweep = Some(WeightGrid { ucorr: Some(vec![0.1, 0.2]), ..WeightGrid::default() });
    let cfg = write_config(tmp.path(), "c.toml", &c);
    let out = tmp.path().join("out");
    for cmd in ["synth", "train", "eval", "probe", "sweep"] {
        let err = cli(&[cmd, "--config", &cfg, "--out", s(&out)]).unwrap_err();
        assert!(format!("{err:#}").contains("batch size"), "{cmd}: {err:#}");
        assert!(!out.exists(), "{cmd} created output");
    }
    let unknown = tmp.path().join("unknown.toml");
    fs::write(&unknown, render_config(&small_config()) + "\nsurprise = 1\n").unwrap();
    let err = cli(&["synth", "--config", s(&unknown), "--out", s(&out)]).unwrap_err();
    assert!(format!("{err:#}").contains("surprise"), "{err:#}");
    assert!(!out.exists());
}

#[test]
fn output_root_comes_from_the_environment_unless_given() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "c.toml", &small_config());
    let env_root = tmp.path().join("from-env");
    let flag_root = tmp.path().join("from-flag");
    let ok = bin().args(["synth", "--config", &cfg]).env("TRIDIRA_OUT", &env_root).current_dir(tmp.path()).output().unwrap().status;
    assert!(ok.success());
    assert!(env_root.join("data/train.manifest").is_file());
    let ok = bin()
        .args(["synth", "--config", &cfg, "--out", s(&flag_root)])
        .env("TRIDIRA_OUT", &env_root)
        .current_dir(tmp.path())
        .output()
        .unwrap()
        .status;
    assert!(ok.success());
    assert!(flag_root.join("data/train.manifest").is_file());
    let ok = bin().args(["synth", "--config", &cfg]).current_dir(tmp.path()).output().unwrap().status;
    assert!(ok.success());
    assert!(tmp.path().join("unused-output-dir/data/train.manifest").is_file());
}

#[test]
fn train_eval_probe_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path().join("run");
    let cfg = write_config(tmp.path(), "c.toml", &small_config());
    cli(&["synth", "--config", &cfg, "--out", s(&root)]).unwrap();
    let data_cfg = root.join("data/experiment.toml");
    let data_cfg = s(&data_cfg);

    cli(&["train", "--config", data_cfg, "--out", s(&root)]).unwrap();
    let train = root.join("train");
    for f in ["config.toml", "stage1.ckpt", "stage1_trace.csv", "summary.csv", "summary.json", "seed-1/best.ckpt", "seed-2/trace.csv"] {
        assert!(train.join(f).is_file(), "missing {f}");
    }
    let per_seed: Vec<MetricReport> = [1, 2].iter().map(|s| read_metrics(&train.join(format!("seed-{s}/test_metrics.json"))).unwrap()).collect();
    let summary = read_metrics(&train.join("summary.json")).unwrap();
    for (name, v) in summary.entries() {
        let mean = (per_seed[0].get(name).unwrap() + per_seed[1].get(name).unwrap()) / 2.0;
        assert_eq!(v, mean, "{name}");
    }
    let err = cli(&["train", "--config", data_cfg, "--out", s(&root)]).unwrap_err();
    assert!(format!("{err:#}").contains("--force"));

    // stage one alone, then stage two from its checkpoint, equals the straight run
    let split = tmp.path().join("split");
    let printed = cli(&["train", "--config", data_cfg, "--out", s(&split), "--stage1-only"]).unwrap();
    assert!(printed.contains("--checkpoint"), "{printed}");
    assert!(!split.join("train/seed-1").exists());
    let stage1 = tmp.path().join("stage1.ckpt");
    fs::copy(split.join("train/stage1.ckpt"), &stage1).unwrap();
    assert_eq!(fs::read(&stage1).unwrap(), fs::read(train.join("stage1.ckpt")).unwrap());
    cli(&["train", "--config", data_cfg, "--out", s(&split), "--checkpoint", s(&stage1), "--force"]).unwrap();
    for f in ["seed-1/best.ckpt", "seed-2/best.ckpt", "seed-1/trace.csv", "seed-2/test_metrics.json", "summary.csv"] {
        assert_eq!(fs::read(split.join("train").join(f)).unwrap(), fs::read(train.join(f)).unwrap(), "{f}");
    }
    let err = cli(&["train", "--config", data_cfg, "--out", s(&split), "--checkpoint", s(&train.join("seed-1/best.ckpt")), "--force"])
        .unwrap_err();
    assert!(format!("{err:#}").contains("not a first-stage checkpoint"), "{err:#}");

    // evaluation is repeatable
    cli(&["eval", "--config", data_cfg, "--out", s(&root)]).unwrap();
    let first = tree(&root.join("eval"));
    cli(&["eval", "--config", data_cfg, "--out", s(&root)]).unwrap();
    assert_eq!(tree(&root.join("eval")), first);
    for f in ["metrics.json", "attention.tsv", "predictions.csv"] {
        assert!(first.contains_key(Path::new(f)), "missing {f}");
    }
    let attention = String::from_utf8(first[Path::new("attention.tsv")].clone()).unwrap();
    assert_eq!(attention.lines().count(), 7);

    // a checkpoint from another configuration is refused unless forced
    let mut other: ExperimentConfig = toml::from_str(&fs::read_to_string(data_cfg).unwrap()).unwrap();
    other.train.learning_rate *= 2.0;
    let other_cfg = write_config(&root.join("data"), "other.toml", &other);
    let err = cli(&["eval", "--config", &other_cfg, "--out", s(&root)]).unwrap_err();
    assert!(format!("{err:#}").contains("fingerprint"), "{err:#}");
    cli(&["eval", "--config", &other_cfg, "--out", s(&root), "--force"]).unwrap();

    // probes on the trained model
    let table = cli(&["probe", "--config", data_cfg, "--out", s(&root)]).unwrap();
    assert!(!table.contains(UNTRAINED_BANNER));
    assert_eq!(table.lines().filter(|l| ["r_star\t", "r_cap_u\t", "u_star\t", "x_hat\t"].iter().any(|p| l.starts_with(p))).count(), 8);
    let probe = root.join("probe");
    assert_eq!(fs::read_to_string(probe.join("results.tsv")).unwrap(), table);
    for rep in ["r_star", "r_cap_u", "u_star", "x_hat"] {
        let proj = fs::read_to_string(probe.join(format!("projection.{rep}.tsv"))).unwrap();
        assert_eq!(proj.lines().count(), 1 + 15 * 3, "{rep}");
    }
    assert!(probe.join("archive/archive.json").is_file());

    // probes on a first-stage checkpoint carry the warning
    let table = cli(&["probe", "--config", data_cfg, "--out", s(&root), "--checkpoint", s(&stage1)]).unwrap();
    assert!(table.starts_with(UNTRAINED_BANNER), "{table}");
    let out = bin().args(["probe", "--config", data_cfg, "--out", s(&root), "--checkpoint", s(&stage1)]).output().unwrap();
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains(UNTRAINED_BANNER));
}

#[test]
fn missing_test_split_is_a_validation_error() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path().join("run");
    let cfg = write_config(tmp.path(), "c.toml", &small_config());
    cli(&["synth", "--config", &cfg, "--out", s(&root)]).unwrap();
    let mut c: ExperimentConfig = toml::from_str(&fs::read_to_string(root.join("data/experiment.toml")).unwrap()).unwrap();
    if let DatasetConfig::Manifest { test, .. } = &mut c.dataset {
        *test = None;
    }
    c.sweep = Some(WeightGrid { sim: Some(vec![0.1]), ..WeightGrid::default() });
    let no_test = write_config(&root.join("data"), "no_test.toml", &c);
    for cmd in ["train", "sweep"] {
        let err = cli(&[cmd, "--config", &no_test, "--out", s(&root)]).unwrap_err();
        assert!(format!("{err:#}").contains("test split"), "{cmd}: {err:#}");
    }
    assert!(!root.join("train").exists());
}

#[test]
fn sweep_runs_every_grid_point() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path().join("run");
    let cfg = write_config(tmp.path(), "c.toml", &small_config());
    cli(&["synth", "--config", &cfg, "--out", s(&root)]).unwrap();
    let mut c: ExperimentConfig = toml::from_str(&fs::read_to_string(root.join("data/experiment.toml")).unwrap()).unwrap();
    c.sweep = Some(WeightGrid { ucorr: Some(vec![0.0, 0.5]), ..WeightGrid::default() });
    c.train.seeds = vec![3];
    c.train.stage2_epochs = 1;
    let sweep_cfg = write_config(&root.join("data"), "sweep.toml", &c);
    let printed = cli(&["sweep", "--config", &sweep_cfg, "--out", s(&root)]).unwrap();
    assert_eq!(printed.lines().count(), 2, "{printed}");
    assert!(printed.contains("ucorr=0.5"), "{printed}");
    let dir = root.join("sweep");
    assert_eq!(fs::read_to_string(dir.join("summary.csv")).unwrap().lines().count(), 3);
    for k in 0..2 {
        let point = dir.join(format!("point-{k:03}"));
        let point_cfg: ExperimentConfig = toml::from_str(&fs::read_to_string(point.join("config.toml")).unwrap()).unwrap();
        let ckpt = load_checkpoint(&point.join("seed-3/best.ckpt")).unwrap();
        assert_eq!(ckpt.fingerprint, fingerprint(&point_cfg));
    }
    assert!(cli(&["sweep", "--config", &sweep_cfg, "--out", s(&root)]).is_err());
}

/// A copied-label dataset: channel 0 of every modality holds the label.
fn copied_label_dataset(dir: &Path) -> Vec<f64> {
    let dims = [3, 2, 2];
    let labels: Vec<f64> = (0..24).map(|i| (i as f64 - 12.0) / 4.0).collect();
    fs::create_dir_all(dir.join("f")).unwrap();
    let mut entries = Vec::new();
    for (i, &y) in labels.iter().enumerate() {
        let paths = Modality::ALL.map(|m| {
            let mut row = vec![0.25 * (i % 3) as f64; dims[m.index()]];
            row[0] = y;
            let seq = FeatureSequence::dense(m, Matrix::from_vec(1, dims[m.index()], row)).unwrap();
            let rel = PathBuf::from(format!("f/{i}.{}.tdrf", m.short()));
            write_feature_file(&seq, &dir.join(&rel)).unwrap();
            rel
        });
        entries.push(ManifestEntry { id: format!("u{i}"), label: y, paths });
    }
    let schema = DatasetSchema { task: Task::Regression, label_range: Some((-3.0, 3.0)), dims };
    write_manifest(&dir.join("all.manifest"), &schema, &entries).unwrap();
    labels
}

/// Weights that pass channel 0 of every modality straight to the prediction:
/// each residual branch contributes nothing and the head reads channel 0.
fn oracle_params(store: &mut ParamStore) {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let name = store.name(id).to_owned();
        let m = store.get_mut(id);
        let zero_branch = name.contains(".attn.o.") || name.contains(".ffn.out.");
        let passthrough = name.starts_with("encoder.conv.") || name.starts_with("fusion.predict.");
        if zero_branch || passthrough {
            m.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        if passthrough && name.ends_with(".weight") {
            m.set(0, 0, 1.0);
        }
    }
}

#[test]
fn perfect_oracle_checkpoint_has_zero_error() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let labels = copied_label_dataset(&data);
    let mut c = small_config();
    c.dataset = DatasetConfig::Manifest { train: "all.manifest".into(), valid: "all.manifest".into(), test: Some("all.manifest".into()) };
    let cfg = write_config(&data, "oracle.toml", &c);

    let mut store = ParamStore::new();
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(5);
    Model::new(&mut store, &c.model, Task::Regression, [3, 2, 2], &mut rng).unwrap();
    oracle_params(&mut store);
    let ckpt = Checkpoint {
        fingerprint: fingerprint(&c),
        stage: Stage::One,
        epoch: 1,
        seed: 0,
        rng: RngState { seed: [0; 32], stream: 0, word_pos: 0 },
        params: store,
        optimizer: AdamW::new(1e-3, 0.0),
    };
    let path = tmp.path().join("oracle.ckpt");
    save_checkpoint(&ckpt, &path).unwrap();

    let root = tmp.path().join("run");
    cli(&["eval", "--config", &cfg, "--out", s(&root), "--checkpoint", s(&path)]).unwrap();
    let metrics = read_metrics(&root.join("eval/metrics.json")).unwrap();
    assert_eq!(metrics.mae, Some(0.0));
    assert_eq!(metrics.acc7, Some(100.0));
    let preds = fs::read_to_string(root.join("eval/predictions.csv")).unwrap();
    assert_eq!(preds.lines().count(), 1 + labels.len());
}
