//! Frozen-representation export and the two-layer probes that audit it.
//!
//! A probe sees one representation of all three modalities at once: every
//! sample contributes one row per modality. The sentiment probe predicts the
//! sample's label from that row; the modality probe predicts which modality
//! the row came from.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::ProbeConfig;
use crate::data::{make_batches, UtteranceRecord};
use crate::encoder::Ctx;
use crate::error::{bail, Result};
use crate::graph::Graph;
use crate::losses::task_loss;
use crate::metrics::{compute_metrics, MetricReport};
use crate::model::{decode_predictions, Model};
use crate::nn::Linear;
use crate::optim::AdamW;
use crate::params::ParamStore;
use crate::tensor::Matrix;
use crate::{Modality, Task};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Representation {
    RStar,
    RCapU,
    UStar,
    XHat,
}

impl Representation {
    pub const ALL: [Representation; 4] = [Representation::RStar, Representation::RCapU, Representation::UStar, Representation::XHat];

    pub fn name(self) -> &'static str {
        match self {
            Representation::RStar => "r_star",
            Representation::RCapU => "r_cap_u",
            Representation::UStar => "u_star",
            Representation::XHat => "x_hat",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|r| r.name() == name)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum ProbeTask {
    Sentiment,
    Modality,
}

impl ProbeTask {
    pub fn name(self) -> &'static str {
        match self {
            ProbeTask::Sentiment => "sentiment",
            ProbeTask::Modality => "modality",
        }
    }
}

/// Exported vectors of one data split.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RepresentationSet {
    pub ids: Vec<String>,
    pub labels: Vec<f64>,
    /// `samples x d_model` per representation and modality.
    pub vectors: BTreeMap<(Representation, Modality), Matrix>,
}

impl RepresentationSet {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn get(&self, rep: Representation, m: Modality) -> Result<&Matrix> {
        match self.vectors.get(&(rep, m)) {
            Some(v) => Ok(v),
            None => bail!(Lookup, "representation {} of {m} is not in the archive", rep.name()),
        }
    }

    /// Rows of all three modalities stacked in modality order, with the
    /// modality index of every row.
    pub fn stacked(&self, rep: Representation) -> Result<(Matrix, Vec<usize>)> {
        let parts = [self.get(rep, Modality::Text)?, self.get(rep, Modality::Audio)?, self.get(rep, Modality::Visual)?];
        let tags = Modality::ALL.iter().flat_map(|m| core::iter::repeat_n(m.index(), parts[m.index()].rows())).collect();
        Ok((Matrix::vstack(&parts), tags))
    }
}

/// Train and test representations plus their provenance.
#[derive(Clone, Debug, PartialEq)]
pub struct RepresentationArchive {
    pub task: Task,
    pub d_model: usize,
    pub train: RepresentationSet,
    pub test: RepresentationSet,
    /// Set when the exporting model had an untrained disentangler.
    pub untrained: bool,
}

/// Evaluation-mode representations of `records`, in order. `x_hat` is always
/// present; the three disentangled parts need the disentangler.
pub fn export_representations(model: &Model, store: &ParamStore, records: &[UtteranceRecord], batch_size: usize) -> Result<RepresentationSet> {
    let mut rows: BTreeMap<(Representation, Modality), Vec<f64>> = BTreeMap::new();
    let mut set = RepresentationSet::default();
    for batch in make_batches(records, batch_size, 0, false)? {
        let mut g = Graph::new(store);
        let mut ctx = Ctx::eval();
        let mut push = |g: &Graph, rep, m, v| rows.entry((rep, m)).or_default().extend_from_slice(g.value(v).data());
        if model.has_disentangler() {
            let out = model.forward_stage2(&mut g, &batch, &mut ctx)?;
            for m in Modality::ALL {
                let p = &out.parts[m.index()];
                push(&g, Representation::RStar, m, p.r_star);
                push(&g, Representation::RCapU, m, p.r_cap_u);
                push(&g, Representation::UStar, m, p.u_star);
                push(&g, Representation::XHat, m, out.encoded[m.index()].pooled);
            }
        } else {
            let out = model.forward_stage1(&mut g, &batch, &mut ctx)?;
            for m in Modality::ALL {
                push(&g, Representation::XHat, m, out.encoded[m.index()].pooled);
            }
        }
        set.ids.extend(batch.ids);
        set.labels.extend(batch.labels);
    }
    let d = model.d_model();
    let n = set.ids.len();
    set.vectors = rows.into_iter().map(|(k, v)| (k, Matrix::from_vec(n, d, v))).collect();
    Ok(set)
}

/// Outcome of one probe.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbeResult {
    pub representation: Representation,
    pub probe_task: ProbeTask,
    pub report: MetricReport,
}

/// Per-column mean and standard deviation of the training rows.
fn standardizer(x: &Matrix) -> (Vec<f64>, Vec<f64>) {
    let n = x.rows() as f64;
    let mean: Vec<f64> = x.col_sums().data().iter().map(|s| s / n).collect();
    let mut var = alloc::vec![0.0; x.cols()];
    for r in 0..x.rows() {
        for (c, v) in x.row(r).iter().enumerate() {
            var[c] += (v - mean[c]) * (v - mean[c]);
        }
    }
    let sd = var.iter().map(|v| libm::sqrt(v / n)).map(|s| if s > 1e-12 { s } else { 1.0 }).collect();
    (mean, sd)
}

fn standardize(x: &Matrix, mean: &[f64], sd: &[f64]) -> Matrix {
    let mut out = x.clone();
    for r in 0..out.rows() {
        for (c, v) in out.row_mut(r).iter_mut().enumerate() {
            *v = (*v - mean[c]) / sd[c];
        }
    }
    out
}

struct ProbeNet {
    hidden: Linear,
    out: Linear,
    task: Task,
}

impl ProbeNet {
    fn forward(&self, g: &mut Graph, x: &Matrix) -> crate::Var {
        let x = g.constant(x.clone());
        let h = self.hidden.forward(g, x);
        let h = g.gelu(h);
        let y = self.out.forward(g, h);
        match self.task {
            Task::Regression => y,
            Task::Classification { .. } => g.softmax_rows(y),
        }
    }
}

/// Trains a fresh two-layer probe on the archive's training split and
/// reports its metrics on the test split. Inputs are standardized with the
/// training-split statistics.
pub fn run_probe(archive: &RepresentationArchive, rep: Representation, probe_task: ProbeTask, cfg: &ProbeConfig) -> Result<ProbeResult> {
    if archive.train.is_empty() || archive.test.is_empty() {
        return Err(crate::Error::EmptyDataset);
    }
    if cfg.batch_size == 0 {
        bail!(Config, "probe batch size must be at least 1");
    }
    let (train_x, train_tags) = archive.train.stacked(rep)?;
    let (test_x, test_tags) = archive.test.stacked(rep)?;
    let targets = |set: &RepresentationSet, tags: &[usize]| -> Vec<f64> {
        match probe_task {
            ProbeTask::Sentiment => set.labels.iter().cycle().take(tags.len()).copied().collect(),
            ProbeTask::Modality => tags.iter().map(|&t| t as f64).collect(),
        }
    };
    let train_y = targets(&archive.train, &train_tags);
    let test_y = targets(&archive.test, &test_tags);
    let task = match probe_task {
        ProbeTask::Sentiment => archive.task,
        ProbeTask::Modality => Task::Classification { num_classes: 3 },
    };
    let (mean, sd) = standardizer(&train_x);
    let train_x = standardize(&train_x, &mean, &sd);
    let test_x = standardize(&test_x, &mean, &sd);

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut store = ParamStore::new();
    let width = cfg.hidden.unwrap_or(archive.d_model);
    let net = ProbeNet {
        hidden: Linear::new(&mut store, "probe.hidden", train_x.cols(), width, &mut rng),
        out: Linear::new(&mut store, "probe.out", width, task.output_width(), &mut rng),
        task,
    };
    let mut opt = AdamW::new(cfg.learning_rate, 0.0);
    let mut order: Vec<usize> = (0..train_x.rows()).collect();
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let x = train_x.select_rows(chunk);
            let y: Vec<f64> = chunk.iter().map(|&i| train_y[i]).collect();
            let mut g = Graph::new(&store);
            let pred = net.forward(&mut g, &x);
            let loss = task_loss(&mut g, pred, &y, task)?;
            let grads = g.backward(loss).param_grads(&store);
            drop(g);
            opt.update(&mut store, &grads)?;
        }
    }
    let mut g = Graph::new(&store);
    let pred = net.forward(&mut g, &test_x);
    let decoded = decode_predictions(g.value(pred), task);
    let report = compute_metrics(&decoded, &test_y, task)?;
    Ok(ProbeResult { representation: rep, probe_task, report })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(vectors: &[(Representation, Modality, Matrix)], labels: &[f64]) -> RepresentationSet {
        RepresentationSet {
            ids: (0..labels.len()).map(|i| alloc::format!("s{i}")).collect(),
            labels: labels.to_vec(),
            vectors: vectors.iter().map(|(r, m, x)| ((*r, *m), x.clone())).collect(),
        }
    }

    fn separable(n: usize, offset: f64) -> (Vec<(Representation, Modality, Matrix)>, Vec<f64>) {
        let labels: Vec<f64> = (0..n).map(|i| (i as f64 / n as f64) * 4.0 - 2.0).collect();
        let vecs = Modality::ALL
            .iter()
            .map(|m| {
                let data = labels.iter().flat_map(|&y| [y, m.index() as f64 * 3.0 + offset]).collect();
                (Representation::XHat, *m, Matrix::from_vec(n, 2, data))
            })
            .collect();
        (vecs, labels)
    }

    #[test]
    fn probes_recover_linear_structure() {
        let (train, ytr) = separable(60, 0.0);
        let (test, yte) = separable(30, 0.1);
        let archive = RepresentationArchive {
            task: Task::Regression,
            d_model: 2,
            train: set(&train, &ytr),
            test: set(&test, &yte),
            untrained: false,
        };
        let cfg = ProbeConfig { hidden: Some(8), epochs: 60, learning_rate: 1e-2, batch_size: 16, seed: 0 };
        let s = run_probe(&archive, Representation::XHat, ProbeTask::Sentiment, &cfg).unwrap();
        assert!(s.report.corr.unwrap() > 0.95, "{:?}", s.report);
        let m = run_probe(&archive, Representation::XHat, ProbeTask::Modality, &cfg).unwrap();
        assert_eq!(m.report.acc_c, Some(100.0));
        let again = run_probe(&archive, Representation::XHat, ProbeTask::Modality, &cfg).unwrap();
        assert_eq!(again, m);
        assert!(matches!(
            run_probe(&archive, Representation::UStar, ProbeTask::Modality, &cfg),
            Err(crate::Error::Lookup(_))
        ));
    }

    #[test]
    fn names_round_trip() {
        for r in Representation::ALL {
            assert_eq!(Representation::from_name(r.name()), Some(r));
        }
    }
}
