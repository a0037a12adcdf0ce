//! Two-stage training, evaluation helpers and checkpoints.
//!
//! Stage one fits encoder, fusion and prediction head with the task loss
//! alone. Stage two starts from the stage-one weights, attaches a freshly
//! initialized disentangler and discriminator, and minimizes the weighted
//! total of all seven terms. Every run is a pure function of its seed, the
//! configuration and the data.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{ModelConfig, TrainSchedule};
use crate::data::{make_batches, UtteranceRecord};
use crate::encoder::Ctx;
use crate::error::{bail, Result};
use crate::fusion::{AttentionTrace, FUSION_LABELS, STAGE1_LABELS};
use crate::graph::Graph;
use crate::losses::{check_decomposition, total_loss, LossComponents, LossReport};
use crate::metrics::{compute_metrics, MetricReport};
use crate::model::{decode_predictions, Model};
use crate::optim::{clip_global_norm, AdamW};
use crate::params::ParamStore;
use crate::Task;

/// RNG streams used for the independent random sources of a run.
const STREAM_INIT: u64 = 0;
const STREAM_DROPOUT: u64 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stage {
    One = 1,
    Two = 2,
}

impl Stage {
    pub fn from_u8(v: u8) -> Option<Self> {
        match v {
            1 => Some(Stage::One),
            2 => Some(Stage::Two),
            _ => None,
        }
    }
}

/// Exact position of a ChaCha8 generator.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self { seed: rng.get_seed(), stream: rng.get_stream(), word_pos: rng.get_word_pos() }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Shuffle seed of one epoch, mixed so nearby seeds and epochs decorrelate.
fn epoch_seed(seed: u64, stage: Stage, epoch: usize) -> u64 {
    let mut z = seed ^ ((stage as u64) << 56) ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Training state that can be saved and resumed.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    /// Identifies the configuration that produced the checkpoint.
    pub fingerprint: String,
    pub stage: Stage,
    /// Completed epochs of `stage`.
    pub epoch: usize,
    pub seed: u64,
    pub rng: RngState,
    pub params: ParamStore,
    pub optimizer: AdamW,
}

/// One row of the per-epoch trace.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    /// One-based epoch number.
    pub epoch: usize,
    /// Sample-weighted means over the epoch's training batches.
    pub losses: LossReport,
    pub valid: MetricReport,
    /// Batches in which the label-independence term was undefined for at least one modality.
    pub degenerate_batches: usize,
}

/// The data a trainer reads.
#[derive(Clone, Copy, Debug)]
pub struct TrainData<'d> {
    pub train: &'d [UtteranceRecord],
    pub valid: &'d [UtteranceRecord],
}

#[derive(Clone, Debug)]
struct Best {
    score: f64,
    epoch: usize,
    params: ParamStore,
}

pub struct Trainer<'d> {
    model: Model,
    store: ParamStore,
    optimizer: AdamW,
    stage: Stage,
    epoch: usize,
    seed: u64,
    rng: ChaCha8Rng,
    schedule: TrainSchedule,
    data: TrainData<'d>,
    fingerprint: String,
    trace: Vec<EpochRecord>,
    best: Option<Best>,
}

impl<'d> Trainer<'d> {
    /// Fresh first-stage run seeded by `schedule.stage1_seed`.
    pub fn stage1(
        cfg: &ModelConfig,
        task: Task,
        input_dims: [usize; 3],
        schedule: &TrainSchedule,
        data: TrainData<'d>,
        fingerprint: &str,
    ) -> Result<Self> {
        schedule.validate()?;
        let seed = schedule.stage1_seed;
        let mut store = ParamStore::new();
        let model = Model::new(&mut store, cfg, task, input_dims, &mut stream_rng(seed, STREAM_INIT))?;
        Ok(Self::assemble(model, store, Stage::One, seed, schedule, data, fingerprint))
    }

    /// Second-stage run from a first-stage checkpoint. The disentangler and
    /// discriminator are initialized from `seed`.
    pub fn stage2(
        stage1: &Checkpoint,
        cfg: &ModelConfig,
        task: Task,
        input_dims: [usize; 3],
        schedule: &TrainSchedule,
        seed: u64,
        data: TrainData<'d>,
    ) -> Result<Self> {
        schedule.validate()?;
        if stage1.stage != Stage::One {
            bail!(Precondition, "the second stage must start from a first-stage checkpoint");
        }
        let (mut model, mut store) = Model::restore(cfg, task, input_dims, &stage1.params)?;
        model.attach_disentangler(&mut store, &mut stream_rng(seed, STREAM_INIT))?;
        Ok(Self::assemble(model, store, Stage::Two, seed, schedule, data, &stage1.fingerprint))
    }

    /// Continues a run from a checkpoint. The best-epoch tracking restarts.
    pub fn resume(
        ckpt: &Checkpoint,
        cfg: &ModelConfig,
        task: Task,
        input_dims: [usize; 3],
        schedule: &TrainSchedule,
        data: TrainData<'d>,
    ) -> Result<Self> {
        schedule.validate()?;
        let (model, store) = Model::restore(cfg, task, input_dims, &ckpt.params)?;
        if (ckpt.stage == Stage::Two) != model.has_disentangler() {
            bail!(Schema, "checkpoint stage does not match its parameters");
        }
        let mut t = Self::assemble(model, store, ckpt.stage, ckpt.seed, schedule, data, &ckpt.fingerprint);
        t.optimizer = ckpt.optimizer.clone();
        t.optimizer.learning_rate = schedule.learning_rate;
        t.optimizer.weight_decay = schedule.weight_decay;
        t.epoch = ckpt.epoch;
        t.rng = ckpt.rng.restore();
        Ok(t)
    }

    fn assemble(
        model: Model,
        store: ParamStore,
        stage: Stage,
        seed: u64,
        schedule: &TrainSchedule,
        data: TrainData<'d>,
        fingerprint: &str,
    ) -> Self {
        Self {
            model,
            store,
            optimizer: AdamW::new(schedule.learning_rate, schedule.weight_decay),
            stage,
            epoch: 0,
            seed,
            rng: stream_rng(seed, STREAM_DROPOUT),
            schedule: schedule.clone(),
            data,
            fingerprint: fingerprint.into(),
            trace: Vec::new(),
            best: None,
        }
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn stage(&self) -> Stage {
        self.stage
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn trace(&self) -> &[EpochRecord] {
        &self.trace
    }

    pub fn planned_epochs(&self) -> usize {
        match self.stage {
            Stage::One => self.schedule.stage1_epochs,
            Stage::Two => self.schedule.stage2_epochs,
        }
    }

    /// Runs the remaining epochs of the schedule.
    pub fn run(&mut self) -> Result<()> {
        while self.epoch < self.planned_epochs() {
            self.run_epoch()?;
        }
        Ok(())
    }

    /// One pass over the training data followed by validation.
    pub fn run_epoch(&mut self) -> Result<EpochRecord> {
        let task = self.model.task();
        let weights = self.model.config().losses.weights;
        let shuffle_seed = epoch_seed(self.seed, self.stage, self.epoch);
        let batches = make_batches(self.data.train, self.schedule.batch_size, shuffle_seed, true)?;
        let mut sums = [0.0; 7];
        let mut seen = 0usize;
        let mut degenerate_batches = 0;
        for (step, batch) in batches.enumerate() {
            let mut g = Graph::new(&self.store);
            let mut ctx = Ctx::train(&mut self.rng);
            let (components, total) = match self.stage {
                Stage::One => {
                    let out = self.model.forward_stage1(&mut g, &batch, &mut ctx)?;
                    let loss = crate::losses::task_loss(&mut g, out.prediction, &batch.labels, task)?;
                    (LossComponents { task: g.scalar(loss), ..LossComponents::default() }, loss)
                }
                Stage::Two => {
                    let out = self.model.forward_stage2(&mut g, &batch, &mut ctx)?;
                    let l = self.model.stage2_losses(&mut g, &out, &batch.labels)?;
                    degenerate_batches += usize::from(l.ucorr_degenerate > 0);
                    (l.vars.components(&g), l.total)
                }
            };
            let where_ = || format!("stage {} epoch {} batch {}", self.stage as u8, self.epoch + 1, step + 1);
            let graph_total = g.scalar(total);
            if !graph_total.is_finite() {
                bail!(Divergence, "total loss is {graph_total} at {}", where_());
            }
            if self.stage == Stage::Two {
                let report = total_loss(components, &weights).map_err(|e| crate::Error::Divergence(format!("{e} at {}", where_())))?;
                check_decomposition(&report, graph_total)?;
            }
            let mut grads = g.backward(total).param_grads(&self.store);
            drop(g);
            if let Some(max) = self.schedule.grad_clip {
                clip_global_norm(&mut grads, max);
            }
            self.optimizer
                .update(&mut self.store, &grads)
                .map_err(|e| crate::Error::Divergence(format!("{e} at {}", where_())))?;
            let n = batch.size();
            for (s, v) in sums.iter_mut().zip(components.values()) {
                *s += v * n as f64;
            }
            seen += n;
        }
        self.epoch += 1;
        let means = LossComponents::from_values(sums.map(|s| s / seen as f64));
        let losses = match self.stage {
            Stage::One => LossReport { components: means, total: means.task },
            Stage::Two => total_loss(means, &weights)?,
        };
        let valid = evaluate(&self.model, &self.store, self.data.valid, self.schedule.batch_size)?.1;
        let score = valid.selection_score(task);
        if self.best.as_ref().is_none_or(|b| score > b.score) {
            self.best = Some(Best { score, epoch: self.epoch, params: self.store.clone() });
        }
        let record = EpochRecord { epoch: self.epoch, losses, valid, degenerate_batches };
        self.trace.push(record);
        Ok(record)
    }

    /// Snapshot of the current state.
    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            fingerprint: self.fingerprint.clone(),
            stage: self.stage,
            epoch: self.epoch,
            seed: self.seed,
            rng: RngState::capture(&self.rng),
            params: self.store.clone(),
            optimizer: self.optimizer.clone(),
        }
    }

    /// Checkpoint holding the parameters of the best validation epoch, or
    /// the current state if no epoch has run.
    pub fn best_checkpoint(&self) -> Checkpoint {
        let mut c = self.checkpoint();
        if let Some(b) = &self.best {
            c.params = b.params.clone();
            c.epoch = b.epoch;
        }
        c
    }

    pub fn best_epoch(&self) -> Option<usize> {
        self.best.as_ref().map(|b| b.epoch)
    }
}

/// Evaluation-mode predictions for `records` in order, decoded to scalars.
pub fn predict_records(model: &Model, store: &ParamStore, records: &[UtteranceRecord], batch_size: usize) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(records.len());
    for batch in make_batches(records, batch_size, 0, false)? {
        let pred = model.predict(store, &batch)?;
        out.extend(decode_predictions(&pred, model.task()));
    }
    Ok(out)
}

/// Predictions and metrics on `records`.
pub fn evaluate(model: &Model, store: &ParamStore, records: &[UtteranceRecord], batch_size: usize) -> Result<(Vec<f64>, MetricReport)> {
    let preds = predict_records(model, store, records, batch_size)?;
    let labels: Vec<f64> = records.iter().map(|r| r.label).collect();
    let report = compute_metrics(&preds, &labels, model.task())?;
    Ok((preds, report))
}

/// Dataset mean of the fusion attention, labelled by the fused representations.
pub fn attention_trace(model: &Model, store: &ParamStore, records: &[UtteranceRecord], batch_size: usize) -> Result<AttentionTrace> {
    let labels: &[&str] = if model.has_disentangler() { &FUSION_LABELS } else { &STAGE1_LABELS };
    let mut trace = AttentionTrace::new(labels, model.fusion.heads());
    for batch in make_batches(records, batch_size, 0, false)? {
        let mut g = Graph::new(store);
        let attn = if model.has_disentangler() {
            model.forward_stage2(&mut g, &batch, &mut Ctx::eval())?.fusion_attention
        } else {
            model.forward_stage1(&mut g, &batch, &mut Ctx::eval())?.fusion_attention
        };
        let probs = g.attention_probs(attn).expect("fusion node is an attention node");
        trace.add_batch(probs, batch.size())?;
    }
    Ok(trace)
}

/// The second-stage result of one seed.
#[derive(Clone, Debug)]
pub struct SeedRun {
    pub seed: u64,
    pub best: Checkpoint,
    pub best_epoch: Option<usize>,
    pub trace: Vec<EpochRecord>,
    pub test: MetricReport,
}

#[derive(Clone, Debug)]
pub struct ExperimentOutcome {
    pub stage1: Checkpoint,
    pub stage1_trace: Vec<EpochRecord>,
    pub runs: Vec<SeedRun>,
    /// Field-wise mean of the per-seed test reports; `None` without second-stage runs.
    pub summary: Option<MetricReport>,
}

/// Stage one once, then stage two for every seed of the schedule, each
/// evaluated on `test` with its best validation checkpoint.
#[allow(clippy::too_many_arguments)]
pub fn run_experiment(
    cfg: &ModelConfig,
    task: Task,
    input_dims: [usize; 3],
    schedule: &TrainSchedule,
    data: TrainData<'_>,
    test: &[UtteranceRecord],
    fingerprint: &str,
    stage1_only: bool,
) -> Result<ExperimentOutcome> {
    let mut t1 = Trainer::stage1(cfg, task, input_dims, schedule, data, fingerprint)?;
    t1.run()?;
    let stage1 = t1.best_checkpoint();
    let stage1_trace = t1.trace().to_vec();
    if stage1_only {
        return Ok(ExperimentOutcome { stage1, stage1_trace, runs: Vec::new(), summary: None });
    }
    continue_experiment(stage1, stage1_trace, cfg, task, input_dims, schedule, data, test)
}

/// Second stage for every seed of the schedule, starting from a finished
/// first-stage checkpoint.
#[allow(clippy::too_many_arguments)]
pub fn continue_experiment(
    stage1: Checkpoint,
    stage1_trace: Vec<EpochRecord>,
    cfg: &ModelConfig,
    task: Task,
    input_dims: [usize; 3],
    schedule: &TrainSchedule,
    data: TrainData<'_>,
    test: &[UtteranceRecord],
) -> Result<ExperimentOutcome> {
    let mut runs = Vec::new();
    for &seed in &schedule.seeds {
        let mut t2 = Trainer::stage2(&stage1, cfg, task, input_dims, schedule, seed, data)?;
        t2.run()?;
        let best = t2.best_checkpoint();
        let (model, store) = Model::restore(cfg, task, input_dims, &best.params)?;
        let (_, test_report) = evaluate(&model, &store, test, schedule.batch_size)?;
        runs.push(SeedRun { seed, best, best_epoch: t2.best_epoch(), trace: t2.trace().to_vec(), test: test_report });
    }
    let summary = if runs.is_empty() {
        None
    } else {
        Some(MetricReport::mean(&runs.iter().map(|r| r.test).collect::<Vec<_>>())?)
    };
    Ok(ExperimentOutcome { stage1, stage1_trace, runs, summary })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{EncoderConfig, PerEncoder, Pooling};
    use crate::data::{generate_synthetic, SyntheticSpec};

    fn cfg() -> ModelConfig {
        ModelConfig {
            encoder: EncoderConfig {
                d_model: 8,
                layers: PerEncoder { text: 1, audio: 1, visual: 1, shared: 1 },
                heads: PerEncoder { text: 2, audio: 2, visual: 2, shared: 2 },
                ffn_mult: 2,
                dropout: 0.1,
                pooling: Pooling::MeanMasked,
                conv_kernel: 1,
            },
            disentangler: crate::config::DisentanglerConfig { tokens: 4, decoder_hidden: None },
            fusion: crate::config::FusionConfig { heads: 2, ..Default::default() },
            losses: Default::default(),
        }
    }

    fn schedule(e1: usize, e2: usize) -> TrainSchedule {
        TrainSchedule {
            stage1_epochs: e1,
            stage2_epochs: e2,
            learning_rate: 1e-3,
            weight_decay: 5e-5,
            batch_size: 16,
            stage1_seed: 3,
            seeds: alloc::vec![1, 2],
            grad_clip: None,
        }
    }

    fn records() -> (Vec<UtteranceRecord>, [usize; 3]) {
        let spec = SyntheticSpec { num_samples: 50, ..SyntheticSpec::default() };
        (generate_synthetic(&spec).unwrap().records, spec.feature_dims)
    }

    #[test]
    fn zero_stage1_epochs_returns_initial_weights() {
        let (recs, dims) = records();
        let data = TrainData { train: &recs[..40], valid: &recs[40..] };
        let mut t = Trainer::stage1(&cfg(), Task::Regression, dims, &schedule(0, 1), data, "fp").unwrap();
        let before = t.params().clone();
        t.run().unwrap();
        let c = t.best_checkpoint();
        assert_eq!(c.params, before);
        assert_eq!(c.epoch, 0);
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let (recs, dims) = records();
        let data = TrainData { train: &recs[..40], valid: &recs[40..] };
        let s = schedule(1, 3);
        let mut t1 = Trainer::stage1(&cfg(), Task::Regression, dims, &s, data, "fp").unwrap();
        t1.run().unwrap();
        let c1 = t1.best_checkpoint();

        let mut straight = Trainer::stage2(&c1, &cfg(), Task::Regression, dims, &s, 7, data).unwrap();
        straight.run().unwrap();

        let mut first = Trainer::stage2(&c1, &cfg(), Task::Regression, dims, &s, 7, data).unwrap();
        first.run_epoch().unwrap();
        let mid = first.checkpoint();
        let mut resumed = Trainer::resume(&mid, &cfg(), Task::Regression, dims, &s, data).unwrap();
        resumed.run().unwrap();
        assert_eq!(resumed.params(), straight.params());
        assert_eq!(resumed.checkpoint(), straight.checkpoint());
    }

    #[test]
    fn rng_state_round_trips() {
        use rand::Rng;
        let mut rng = stream_rng(5, 3);
        let _: u64 = rng.random();
        let saved = RngState::capture(&rng);
        let mut back = saved.restore();
        assert_eq!(rng.random::<u64>(), back.random::<u64>());
    }

    #[test]
    fn stage2_needs_stage1_checkpoint() {
        let (recs, dims) = records();
        let data = TrainData { train: &recs[..40], valid: &recs[40..] };
        let s = schedule(0, 1);
        let t1 = Trainer::stage1(&cfg(), Task::Regression, dims, &s, data, "fp").unwrap();
        let mut c = t1.checkpoint();
        c.stage = Stage::Two;
        assert!(matches!(
            Trainer::stage2(&c, &cfg(), Task::Regression, dims, &s, 1, data),
            Err(crate::Error::Precondition(_))
        ));
    }
}
