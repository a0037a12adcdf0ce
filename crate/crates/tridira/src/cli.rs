//! The `tridira` command line.
//!
//! Every command loads and validates its configuration, overrides, input
//! files and checkpoint before it creates any output. Outputs go below the
//! output root: `--out`, else the `TRIDIRA_OUT` environment variable, else
//! the configuration's `output_dir`.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tridira_core::config::{DatasetConfig, ExperimentConfig};
use tridira_core::data::{SyntheticDataset, UtteranceRecord};
use tridira_core::metrics::MetricReport;
use tridira_core::model::Model;
use tridira_core::probe::{export_representations, run_probe, ProbeTask, Representation, RepresentationArchive};
use tridira_core::projection::pca2d;
use tridira_core::trainer::{attention_trace, continue_experiment, evaluate, Checkpoint, ExperimentOutcome, Stage, TrainData, Trainer};
use tridira_core::{Modality, ParamStore};

use crate::archive::{read_archive, write_archive};
use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::error::Error;
use crate::experiment::{check_dataset_paths, fingerprint, load_config, load_dataset, render_config, Dataset, LoadedConfig};
use crate::manifest::{write_manifest, ManifestEntry};
use crate::report;
use crate::tdrf::write_feature_file;

#[derive(Debug, Parser)]
#[command(name = "tridira", version, about = "Triple disentangled multimodal sentiment models")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the configured synthetic dataset as TDRF files and manifests.
    Synth {
        #[command(flatten)]
        common: Common,
        /// Generator seed, replacing the configured one.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train stage one, then stage two for every configured seed.
    Train {
        #[command(flatten)]
        common: Common,
        /// Run stage two for this seed only.
        #[arg(long)]
        seed: Option<u64>,
        /// Stop after stage one.
        #[arg(long)]
        stage1_only: bool,
        /// Skip stage one and start stage two from this first-stage checkpoint.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Compute test-split metrics and the fusion attention map of a checkpoint.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Export representations and train sentiment and modality probes on them.
    Probe {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Train once per point of the configured loss-weight grid.
    Sweep {
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Debug, Args)]
pub struct Common {
    /// TOML configuration file, or `preset:NAME`.
    #[arg(long)]
    pub config: String,
    /// Output root.
    #[arg(long, env = "TRIDIRA_OUT")]
    pub out: Option<PathBuf>,
    /// Replace existing outputs, and accept a checkpoint from a different configuration.
    #[arg(long)]
    pub force: bool,
}

impl Common {
    fn output_root(&self, config: &ExperimentConfig) -> PathBuf {
        self.out.clone().unwrap_or_else(|| PathBuf::from(&config.output_dir))
    }
}

pub fn run(cli: Cli, stdout: &mut dyn Write) -> anyhow::Result<()> {
    match cli.command {
        Command::Synth { common, seed } => synth(&common, seed, stdout),
        Command::Train { common, seed, stage1_only, checkpoint } => train(&common, seed, stage1_only, checkpoint.as_deref(), stdout),
        Command::Eval { common, checkpoint } => eval(&common, checkpoint.as_deref(), stdout),
        Command::Probe { common, checkpoint } => probe(&common, checkpoint.as_deref(), stdout),
        Command::Sweep { common } => sweep(&common, stdout),
    }
}

/// Refuses a nonempty `dir` unless `force`. Nothing is created here.
fn check_fresh(dir: &Path, force: bool) -> anyhow::Result<()> {
    let nonempty = dir.is_dir() && fs::read_dir(dir).with_context(|| dir.display().to_string())?.next().is_some();
    if nonempty && !force {
        return Err(Error::Refused(format!("{} exists and is not empty (pass --force to replace it)", dir.display())).into());
    }
    Ok(())
}

fn recreate(dir: &Path) -> anyhow::Result<()> {
    if dir.exists() {
        fs::remove_dir_all(dir).with_context(|| format!("removing {}", dir.display()))?;
    }
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn write_text(path: &Path, text: &str) -> anyhow::Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn load(common: &Common) -> anyhow::Result<LoadedConfig> {
    let loaded = load_config(&common.config)?;
    check_dataset_paths(&loaded)?;
    Ok(loaded)
}

/// Loads a checkpoint and checks that it was produced under `config`.
fn load_matching_checkpoint(path: &Path, config: &ExperimentConfig, force: bool, stderr_note: &mut dyn Write) -> anyhow::Result<Checkpoint> {
    let ckpt = load_checkpoint(path)?;
    let expected = fingerprint(config);
    if ckpt.fingerprint != expected {
        if !force {
            return Err(Error::Refused(format!(
                "checkpoint {} was produced by a different configuration (fingerprint {} vs {expected}); pass --force to use it anyway",
                path.display(),
                ckpt.fingerprint
            ))
            .into());
        }
        writeln!(stderr_note, "note: using checkpoint with mismatched configuration fingerprint")?;
    }
    Ok(ckpt)
}

fn default_checkpoint(root: &Path, config: &ExperimentConfig) -> PathBuf {
    root.join("train").join(format!("seed-{}", config.train.seeds[0])).join("best.ckpt")
}

fn synth(common: &Common, seed: Option<u64>, stdout: &mut dyn Write) -> anyhow::Result<()> {
    let mut loaded = load(common)?;
    let DatasetConfig::Synthetic { spec, .. } = &mut loaded.config.dataset else {
        bail!("the configuration's dataset is not synthetic");
    };
    if let Some(s) = seed {
        spec.seed = s;
    }
    loaded.config.validate()?;
    let root = common.output_root(&loaded.config);
    let dir = root.join("data");
    check_fresh(&dir, common.force)?;
    let data = load_dataset(&loaded)?;
    let generated = data.synthetic.as_ref().expect("synthetic dataset");

    recreate(&dir)?;
    fs::create_dir_all(dir.join("features"))?;
    let entries = |records: &[UtteranceRecord]| -> anyhow::Result<Vec<ManifestEntry>> {
        records
            .iter()
            .map(|r| {
                let paths = Modality::ALL.map(|m| PathBuf::from(format!("features/{}.{}.tdrf", r.id, m.short())));
                for m in Modality::ALL {
                    write_feature_file(r.feature(m), &dir.join(&paths[m.index()]))?;
                }
                Ok(ManifestEntry { id: r.id.clone(), label: r.label, paths })
            })
            .collect()
    };
    let mut splits = vec![("train", &data.train), ("valid", &data.valid)];
    if let Some(t) = &data.test {
        splits.push(("test", t));
    }
    for (name, records) in &splits {
        write_manifest(&dir.join(format!("{name}.manifest")), &data.schema, &entries(records)?)?;
    }
    let latent_path = dir.join("latents.csv");
    write_latents(&latent_path, generated)?;

    // A configuration that trains on the files just written.
    let mut on_disk = loaded.config.clone();
    on_disk.dataset = DatasetConfig::Manifest {
        train: "train.manifest".into(),
        valid: "valid.manifest".into(),
        test: data.test.as_ref().map(|_| "test.manifest".into()),
    };
    write_text(&dir.join("experiment.toml"), &render_config(&on_disk))?;
    writeln!(stdout, "wrote {} records to {}", generated.records.len(), dir.display())?;
    writeln!(stdout, "latent log: {}", latent_path.display())?;
    Ok(())
}

fn write_latents(path: &Path, data: &SyntheticDataset) -> anyhow::Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let first = &data.latents[0];
    let mut header = vec!["id".to_owned(), "label".to_owned()];
    header.extend((0..first.shared.len()).map(|i| format!("s{i}")));
    for m in Modality::ALL {
        header.extend((0..first.effective[m.index()].len()).map(|i| format!("p_{}{i}", m.short())));
    }
    for m in Modality::ALL {
        header.extend((0..first.nuisance[m.index()].len()).map(|i| format!("n_{}{i}", m.short())));
    }
    w.write_record(&header)?;
    for (rec, lat) in data.records.iter().zip(&data.latents) {
        let mut row = vec![rec.id.clone(), format!("{:?}", rec.label)];
        let values = lat.shared.iter().chain(lat.effective.iter().flatten()).chain(lat.nuisance.iter().flatten());
        row.extend(values.map(|v| format!("{v:?}")));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

fn train(common: &Common, seed: Option<u64>, stage1_only: bool, checkpoint: Option<&Path>, stdout: &mut dyn Write) -> anyhow::Result<()> {
    let mut loaded = load(common)?;
    if let Some(s) = seed {
        loaded.config.train.seeds = vec![s];
    }
    loaded.config.validate()?;
    if stage1_only && checkpoint.is_some() {
        bail!("--stage1-only and --checkpoint cannot be combined");
    }
    let config = &loaded.config;
    let root = common.output_root(config);
    let dir = root.join("train");
    check_fresh(&dir, common.force)?;
    let stage1 = match checkpoint {
        Some(p) => {
            let c = load_matching_checkpoint(p, config, common.force, &mut std::io::stderr())?;
            if c.stage != Stage::One {
                bail!("{} is not a first-stage checkpoint", p.display());
            }
            Some(c)
        }
        None => None,
    };
    let data = load_dataset(&loaded)?;
    let test = data.test()?;

    recreate(&dir)?;
    write_text(&dir.join("config.toml"), &render_config(config))?;
    let fp = fingerprint(config);
    let (task, dims) = (data.schema.task, data.schema.dims);
    let split = TrainData { train: &data.train, valid: &data.valid };
    let (stage1, stage1_trace) = match stage1 {
        Some(c) => (c, Vec::new()),
        None => {
            let mut t = Trainer::stage1(&config.model, task, dims, &config.train, split, &fp)?;
            t.run()?;
            (t.best_checkpoint(), t.trace().to_vec())
        }
    };
    save_checkpoint(&stage1, &dir.join("stage1.ckpt"))?;
    if !stage1_trace.is_empty() {
        report::write_trace(&dir.join("stage1_trace.csv"), &stage1_trace)?;
    }
    if stage1_only {
        writeln!(stdout, "stage one finished; continue with --checkpoint {}", dir.join("stage1.ckpt").display())?;
        return Ok(());
    }
    let outcome = continue_experiment(stage1, stage1_trace, &config.model, task, dims, &config.train, split, test)?;
    let summary = write_runs(&dir, &outcome, &fp)?;
    writeln!(stdout, "{}", report::metrics_json(&summary))?;
    Ok(())
}

/// Per-seed checkpoints, traces and test metrics plus the seed summary.
fn write_runs(dir: &Path, outcome: &ExperimentOutcome, fp: &str) -> anyhow::Result<MetricReport> {
    let mut rows = Vec::new();
    for run in &outcome.runs {
        let sub = dir.join(format!("seed-{}", run.seed));
        fs::create_dir_all(&sub)?;
        let mut best = run.best.clone();
        best.fingerprint = fp.to_owned();
        save_checkpoint(&best, &sub.join("best.ckpt"))?;
        report::write_trace(&sub.join("trace.csv"), &run.trace)?;
        report::write_metrics(&sub.join("test_metrics.json"), &run.test)?;
        rows.push((format!("seed-{}", run.seed), run.test));
    }
    let summary = outcome.summary.expect("at least one seed ran");
    rows.push(("mean".to_owned(), summary));
    report::write_summary(&dir.join("summary.csv"), &rows)?;
    report::write_metrics(&dir.join("summary.json"), &summary)?;
    Ok(summary)
}

fn restore(config: &ExperimentConfig, data: &Dataset, ckpt: &Checkpoint) -> anyhow::Result<(Model, ParamStore)> {
    Ok(Model::restore(&config.model, data.schema.task, data.schema.dims, &ckpt.params)?)
}

fn eval(common: &Common, checkpoint: Option<&Path>, stdout: &mut dyn Write) -> anyhow::Result<()> {
    let loaded = load(common)?;
    let config = &loaded.config;
    let root = common.output_root(config);
    let path = checkpoint.map(Path::to_path_buf).unwrap_or_else(|| default_checkpoint(&root, config));
    let ckpt = load_matching_checkpoint(&path, config, common.force, &mut std::io::stderr())?;
    let data = load_dataset(&loaded)?;
    let test = data.test()?;
    let (model, store) = restore(config, &data, &ckpt)?;
    let (preds, metrics) = evaluate(&model, &store, test, config.train.batch_size)?;
    let attention = attention_trace(&model, &store, test, config.train.batch_size)?;

    let dir = root.join("eval");
    fs::create_dir_all(&dir)?;
    report::write_metrics(&dir.join("metrics.json"), &metrics)?;
    report::write_attention(&dir.join("attention.tsv"), &attention)?;
    let mut w = csv::Writer::from_path(dir.join("predictions.csv"))?;
    w.write_record(["id", "label", "prediction"])?;
    for (r, p) in test.iter().zip(&preds) {
        w.write_record([r.id.clone(), format!("{:?}", r.label), format!("{p:?}")])?;
    }
    w.flush()?;
    writeln!(stdout, "{}", report::metrics_json(&metrics))?;
    Ok(())
}

fn probe(common: &Common, checkpoint: Option<&Path>, stdout: &mut dyn Write) -> anyhow::Result<()> {
    let loaded = load(common)?;
    let config = &loaded.config;
    let root = common.output_root(config);
    let path = checkpoint.map(Path::to_path_buf).unwrap_or_else(|| default_checkpoint(&root, config));
    let ckpt = load_matching_checkpoint(&path, config, common.force, &mut std::io::stderr())?;
    let data = load_dataset(&loaded)?;
    let test = data.test()?;
    let (mut model, mut store) = restore(config, &data, &ckpt)?;
    let mut untrained = ckpt.stage == Stage::Two && ckpt.epoch == 0;
    if !model.has_disentangler() {
        model.attach_disentangler(&mut store, &mut ChaCha8Rng::seed_from_u64(config.train.seeds[0]))?;
        untrained = true;
    }
    if untrained {
        eprintln!("{}", report::UNTRAINED_BANNER);
    }
    let bs = config.train.batch_size;
    let exported = RepresentationArchive {
        task: data.schema.task,
        d_model: model.d_model(),
        train: export_representations(&model, &store, &data.train, bs)?,
        test: export_representations(&model, &store, test, bs)?,
        untrained,
    };
    let dir = root.join("probe");
    fs::create_dir_all(&dir)?;
    let archive_dir = dir.join("archive");
    write_archive(&archive_dir, &exported)?;
    // Probe what is on disk, so the results can be reproduced from the archive alone.
    let archive = read_archive(&archive_dir)?;

    let mut results = Vec::new();
    for task in [ProbeTask::Sentiment, ProbeTask::Modality] {
        for rep in Representation::ALL {
            results.push(run_probe(&archive, rep, task, &config.probe)?);
        }
    }
    for rep in Representation::ALL {
        let (stacked, _) = archive.test.stacked(rep)?;
        let proj = pca2d(&stacked)?;
        report::write_projection(&dir.join(format!("projection.{}.tsv", rep.name())), &archive.test.ids, &archive.test.labels, &proj)?;
    }
    let table = report::render_probe_table(&results, untrained);
    report::write_and_echo(&dir.join("results.tsv"), &table, stdout)?;
    Ok(())
}

fn sweep(common: &Common, stdout: &mut dyn Write) -> anyhow::Result<()> {
    let loaded = load(common)?;
    let config = &loaded.config;
    let Some(grid) = &config.sweep else {
        bail!("the configuration has no [sweep] grid");
    };
    let points = grid.expand(config.model.losses.weights)?;
    let root = common.output_root(config);
    let dir = root.join("sweep");
    check_fresh(&dir, common.force)?;
    let data = load_dataset(&loaded)?;
    let test = data.test()?;

    recreate(&dir)?;
    let (task, dims) = (data.schema.task, data.schema.dims);
    let split = TrainData { train: &data.train, valid: &data.valid };
    // Stage one only sees the task loss, so all grid points share it.
    let mut t1 = Trainer::stage1(&config.model, task, dims, &config.train, split, &fingerprint(config))?;
    t1.run()?;
    let stage1 = t1.best_checkpoint();
    save_checkpoint(&stage1, &dir.join("stage1.ckpt"))?;
    report::write_trace(&dir.join("stage1_trace.csv"), t1.trace())?;

    let mut w = csv::Writer::from_path(dir.join("summary.csv"))?;
    let mut header_written = false;
    for (k, weights) in points.iter().enumerate() {
        let mut point = config.clone();
        point.model.losses.weights = *weights;
        point.sweep = None;
        let sub = dir.join(format!("point-{k:03}"));
        fs::create_dir_all(&sub)?;
        write_text(&sub.join("config.toml"), &render_config(&point))?;
        let mut start = stage1.clone();
        start.fingerprint = fingerprint(&point);
        let outcome = continue_experiment(start, Vec::new(), &point.model, task, dims, &point.train, split, test)?;
        let summary = write_runs(&sub, &outcome, &fingerprint(&point))?;
        let entries = summary.entries();
        if !header_written {
            let mut header: Vec<String> = ["point", "task", "sim", "ucorr", "recon", "modality", "h"].map(String::from).to_vec();
            header.extend(entries.iter().map(|(n, _)| n.to_string()));
            w.write_record(&header)?;
            header_written = true;
        }
        let mut row = vec![format!("point-{k:03}")];
        row.extend([weights.task, weights.sim, weights.ucorr, weights.recon, weights.modality, weights.h].map(|v| format!("{v:?}")));
        row.extend(entries.iter().map(|(_, v)| format!("{v:?}")));
        w.write_record(&row)?;
        writeln!(
            stdout,
            "point-{k:03} task={} sim={} ucorr={} recon={} modality={} h={}",
            weights.task, weights.sim, weights.ucorr, weights.recon, weights.modality, weights.h
        )?;
    }
    w.flush()?;
    Ok(())
}
