//! Central finite-difference gradient checking.
//!
//! The checker perturbs one scalar at a time by `±step`, re-runs the whole
//! forward pass and compares `(f(x+h) - f(x-h)) / 2h` with the tape's
//! adjoint. The error for one entry is
//! `|analytic - numeric| / max(|analytic|, |numeric|, floor)`; the floor keeps
//! entries whose true gradient is essentially zero from being judged on
//! pure rounding noise.

use alloc::string::String;
use alloc::vec::Vec;

use crate::graph::{Graph, Var};
use crate::params::ParamStore;
use crate::tensor::Matrix;

pub const DEFAULT_STEP: f64 = 1e-4;
pub const DEFAULT_FLOOR: f64 = 1e-3;

#[derive(Clone, Copy, Debug)]
pub struct GradCheckConfig {
    pub step: f64,
    pub floor: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self { step: DEFAULT_STEP, floor: DEFAULT_FLOOR }
    }
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter (or input) holding the worst entry.
    pub worst: String,
    pub checked: usize,
}

fn rel_err(a: f64, n: f64, floor: f64) -> f64 {
    libm::fabs(a - n) / a.abs().max(n.abs()).max(floor)
}

/// Checks gradients with respect to every entry of `inputs`.
pub fn check_inputs<F>(inputs: &[Matrix], build: F) -> f64
where
    F: Fn(&mut Graph, &[Var]) -> Var,
{
    check_inputs_with(inputs, build, GradCheckConfig::default()).max_rel_error
}

pub fn check_inputs_with<F>(inputs: &[Matrix], build: F, cfg: GradCheckConfig) -> GradCheckReport
where
    F: Fn(&mut Graph, &[Var]) -> Var,
{
    let empty = ParamStore::new();
    let eval = |xs: &[Matrix]| {
        let mut g = Graph::new(&empty);
        let vars: Vec<Var> = xs.iter().map(|x| g.input(x.clone())).collect();
        let loss = build(&mut g, &vars);
        g.scalar(loss)
    };
    let mut g = Graph::new(&empty);
    let vars: Vec<Var> = inputs.iter().map(|x| g.input(x.clone())).collect();
    let loss = build(&mut g, &vars);
    let grads = g.backward(loss);

    let mut report = GradCheckReport::default();
    let mut work: Vec<Matrix> = inputs.to_vec();
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads.get(*v).cloned().unwrap_or_else(|| Matrix::zeros(inputs[i].rows(), inputs[i].cols()));
        for e in 0..inputs[i].len() {
            let orig = inputs[i].data()[e];
            work[i].data_mut()[e] = orig + cfg.step;
            let fp = eval(&work);
            work[i].data_mut()[e] = orig - cfg.step;
            let fm = eval(&work);
            work[i].data_mut()[e] = orig;
            let numeric = (fp - fm) / (2.0 * cfg.step);
            let err = rel_err(analytic.data()[e], numeric, cfg.floor);
            report.checked += 1;
            if err > report.max_rel_error || report.worst.is_empty() {
                report.max_rel_error = report.max_rel_error.max(err);
                report.worst = alloc::format!("input {i}[{e}]");
            }
        }
    }
    report
}

/// Checks gradients with respect to every parameter bound by `build`.
///
/// `build` must be deterministic in the parameter values.
pub fn check_params<F>(store: &ParamStore, build: F, cfg: GradCheckConfig) -> GradCheckReport
where
    F: Fn(&mut Graph) -> Var,
{
    check_params_where(store, build, cfg, |_| true)
}

/// Like [`check_params`], restricted to parameters whose name passes `keep`.
pub fn check_params_where<F, K>(store: &ParamStore, build: F, cfg: GradCheckConfig, keep: K) -> GradCheckReport
where
    F: Fn(&mut Graph) -> Var,
    K: Fn(&str) -> bool,
{
    let mut g = Graph::new(store);
    let loss = build(&mut g);
    let grads = g.backward(loss).param_grads(store);
    drop(g);

    let mut work = store.clone();
    let mut report = GradCheckReport::default();
    for (pid, analytic) in grads.into_iter().filter(|(pid, _)| keep(store.name(*pid))) {
        for e in 0..analytic.len() {
            let orig = store.get(pid).data()[e];
            work.get_mut(pid).data_mut()[e] = orig + cfg.step;
            let fp = {
                let mut g = Graph::new(&work);
                let l = build(&mut g);
                g.scalar(l)
            };
            work.get_mut(pid).data_mut()[e] = orig - cfg.step;
            let fm = {
                let mut g = Graph::new(&work);
                let l = build(&mut g);
                g.scalar(l)
            };
            work.get_mut(pid).data_mut()[e] = orig;
            let numeric = (fp - fm) / (2.0 * cfg.step);
            let err = rel_err(analytic.data()[e], numeric, cfg.floor);
            report.checked += 1;
            if err > report.max_rel_error || report.worst.is_empty() {
                report.max_rel_error = report.max_rel_error.max(err);
                report.worst = alloc::format!("{}[{e}]", store.name(pid));
            }
        }
    }
    report
}

/// Outcome of one block or loss in [`suite::run`].
#[derive(Clone, Debug)]
pub struct BlockCheck {
    pub name: String,
    pub report: GradCheckReport,
    /// Scalars that should have been checked; fewer means some parameter
    /// or input received no gradient at all.
    pub expected: usize,
}

impl BlockCheck {
    pub fn complete(&self) -> bool {
        self.report.checked == self.expected
    }
}

pub mod suite {
    //! Gradient checks of every trainable block and every loss term on
    //! miniature shapes: `d_model` 8, batch 4, at most 3 frames.

    use alloc::string::String;
    use alloc::vec;
    use alloc::vec::Vec;

    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::{check_inputs_with, check_params, check_params_where, BlockCheck, GradCheckConfig};
    use crate::config::{
        CmdBounds, DisentanglerConfig, DiscriminatorMode, EncoderConfig, FusionConfig, HsicKernel, LossConfig, ModelConfig, PerEncoder,
        Pooling, UcorrMode,
    };
    use crate::data::{FeatureSequence, UtteranceBatch, UtteranceRecord};
    use crate::disentangler::Disentangler;
    use crate::encoder::{Ctx, Encoder};
    use crate::fusion::{Discriminator, Fusion};
    use crate::graph::{Graph, Var};
    use crate::losses::{self, HsicOptions};
    use crate::model::Model;
    use crate::params::ParamStore;
    use crate::tensor::Matrix;
    use crate::{Modality, Task};

    pub const D_MODEL: usize = 8;
    pub const BATCH: usize = 4;
    pub const MAX_FRAMES: usize = 3;
    pub const INPUT_DIMS: [usize; 3] = [5, 4, 3];

    /// Model configuration of the suite. The loss terms use a fixed kernel
    /// width and fixed moment bounds so the checked function has no
    /// data-dependent constants.
    pub fn config() -> ModelConfig {
        ModelConfig {
            encoder: EncoderConfig {
                d_model: D_MODEL,
                layers: PerEncoder { text: 2, audio: 2, visual: 2, shared: 2 },
                heads: PerEncoder { text: 2, audio: 2, visual: 2, shared: 2 },
                ffn_mult: 2,
                dropout: 0.0,
                pooling: Pooling::MeanMasked,
                conv_kernel: 1,
            },
            disentangler: DisentanglerConfig { tokens: 4, decoder_hidden: None },
            fusion: FusionConfig { heads: 2, discriminator: DiscriminatorMode::Shared },
            losses: LossConfig {
                hsic_bandwidth: crate::config::HsicBandwidth::Fixed,
                cmd_bounds: CmdBounds::Fixed { a: -1.0, b: 1.0 },
                ..LossConfig::default()
            },
        }
    }

    fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
        Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    /// Four utterances with ragged lengths, so padding is exercised.
    pub fn batch(rng: &mut ChaCha8Rng) -> UtteranceBatch {
        let lengths = [[3, 2, 3], [1, 3, 2], [2, 3, 1], [3, 1, 3]];
        let records: Vec<UtteranceRecord> = (0..BATCH)
            .map(|i| UtteranceRecord {
                id: alloc::format!("u{i}"),
                label: rng.random_range(-3.0..3.0),
                features: Modality::ALL.map(|m| {
                    FeatureSequence::dense(m, random(rng, lengths[i][m.index()], INPUT_DIMS[m.index()])).expect("finite")
                }),
            })
            .collect();
        let refs: Vec<&UtteranceRecord> = records.iter().collect();
        UtteranceBatch::from_records(&refs).expect("consistent records")
    }

    /// `sum(x * w)` for a fixed random `w`, a loss whose gradient is `w`.
    fn probe_sum(g: &mut Graph, x: Var, rng: &mut ChaCha8Rng) -> Var {
        let (r, c) = g.shape(x);
        let w = g.constant(random(rng, r, c));
        let p = g.mul(x, w);
        g.sum(p)
    }

    fn sum_all(g: &mut Graph, parts: &[Var]) -> Var {
        let mut acc = parts[0];
        for &p in &parts[1..] {
            acc = g.add(acc, p);
        }
        acc
    }

    fn param_block(name: &str, store: &ParamStore, cfg: GradCheckConfig, build: impl Fn(&mut Graph) -> Var) -> BlockCheck {
        BlockCheck { name: name.into(), report: check_params(store, build, cfg), expected: store.numel() }
    }

    fn input_block(name: &str, inputs: &[Matrix], cfg: GradCheckConfig, build: impl Fn(&mut Graph, &[Var]) -> Var) -> BlockCheck {
        let expected = inputs.iter().map(Matrix::len).sum();
        BlockCheck { name: name.into(), report: check_inputs_with(inputs, build, cfg), expected }
    }

    /// Runs every check. Inputs and weights are drawn from `seed`. Blocks and
    /// losses use `cfg`; the assembled-network checks use [`COMPOSED_STEP`].
    pub fn run(seed: u64, cfg: GradCheckConfig) -> Vec<BlockCheck> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model_cfg = config();
        let b = batch(&mut rng);
        let mut out = Vec::new();

        // Encoders: every modality-specific layer plus the shared encoder.
        {
            let mut store = ParamStore::new();
            let enc = Encoder::new(&mut store, &model_cfg.encoder, INPUT_DIMS, &mut rng).expect("valid config");
            let wseed: u64 = rng.random();
            out.push(param_block("encoder", &store, cfg, |g| {
                let mut w = ChaCha8Rng::seed_from_u64(wseed);
                let inputs = Modality::ALL.map(|m| b.modality(m));
                let encoded = enc.forward(g, inputs, &mut Ctx::eval()).expect("shapes match");
                let terms: Vec<Var> = encoded.iter().map(|e| probe_sum(g, e.pooled, &mut w)).collect();
                sum_all(g, &terms)
            }));
        }

        // Disentangler: every output of every modality.
        {
            let mut store = ParamStore::new();
            let dis = Disentangler::new(&mut store, &model_cfg.disentangler, D_MODEL, &mut rng).expect("valid config");
            let x = [random(&mut rng, BATCH, D_MODEL), random(&mut rng, BATCH, D_MODEL), random(&mut rng, BATCH, D_MODEL)];
            let wseed: u64 = rng.random();
            out.push(param_block("disentangler", &store, cfg, |g| {
                let mut w = ChaCha8Rng::seed_from_u64(wseed);
                let mut terms = Vec::new();
                for m in Modality::ALL {
                    let xv = g.constant(x[m.index()].clone());
                    let d = dis.forward(g, m, xv).expect("shapes match");
                    for v in [d.r_star, d.r_cap_u, d.u_star, d.reconstruction] {
                        terms.push(probe_sum(g, v, &mut w));
                    }
                }
                sum_all(g, &terms)
            }));
        }

        // Fusion and prediction head, for both task kinds.
        for (name, task) in [("fusion + regression head", Task::Regression), ("fusion + class head", Task::Classification { num_classes: 3 })] {
            let mut store = ParamStore::new();
            let fusion = Fusion::new(&mut store, &model_cfg.fusion, D_MODEL, task, &mut rng).expect("valid config");
            let tokens = random(&mut rng, BATCH * 6, D_MODEL);
            let wseed: u64 = rng.random();
            out.push(param_block(name, &store, cfg, |g| {
                let mut w = ChaCha8Rng::seed_from_u64(wseed);
                let t = g.constant(tokens.clone());
                let fused = fusion.fuse(g, t, BATCH, 6).expect("shapes match");
                let pred = fusion.predict(g, fused.fused, task);
                probe_sum(g, pred, &mut w)
            }));
        }

        // Modality discriminator heads.
        for (name, mode) in [("discriminator (shared)", DiscriminatorMode::Shared), ("discriminator (per modality)", DiscriminatorMode::PerModality)] {
            let mut store = ParamStore::new();
            let disc = Discriminator::new(&mut store, mode, D_MODEL, &mut rng);
            let feats: Vec<(Matrix, Matrix)> = (0..3).map(|_| (random(&mut rng, BATCH, D_MODEL), random(&mut rng, BATCH, D_MODEL))).collect();
            out.push(param_block(name, &store, cfg, |g| {
                let mut terms = Vec::new();
                for m in Modality::ALL {
                    let (u, r) = &feats[m.index()];
                    let (u, r) = (g.constant(u.clone()), g.constant(r.clone()));
                    let probs = disc.discriminate(g, m, u, r).expect("shapes match");
                    terms.push(losses::modality_loss(g, probs, m).expect("valid probabilities"));
                }
                sum_all(g, &terms)
            }));
        }

        // Loss terms with respect to their inputs.
        let labels: Vec<f64> = (0..BATCH).map(|_| rng.random_range(-3.0..3.0)).collect();
        let classes: Vec<f64> = vec![0.0, 2.0, 1.0, 2.0];
        let cls = Task::Classification { num_classes: 3 };
        let col = random(&mut rng, BATCH, 1);
        let logits = random(&mut rng, BATCH, 3);
        out.push(input_block("task loss (regression)", &[col.clone()], cfg, |g, v| {
            losses::task_loss(g, v[0], &labels, Task::Regression).expect("valid")
        }));
        out.push(input_block("task loss (classification)", &[logits.clone()], cfg, |g, v| {
            let p = g.softmax_rows(v[0]);
            losses::task_loss(g, p, &classes, cls).expect("valid")
        }));
        out.push(input_block("modality loss", &[logits.clone()], cfg, |g, v| {
            let p = g.softmax_rows(v[0]);
            losses::modality_loss(g, p, Modality::Audio).expect("valid")
        }));
        for mode in [UcorrMode::Independence, UcorrMode::SignedCorrelation] {
            out.push(input_block(&alloc::format!("label-independence loss ({mode:?}, regression)"), &[col.clone()], cfg, |g, v| {
                losses::ucorr_loss(g, v[0], &labels, Task::Regression, mode).expect("valid").loss
            }));
            out.push(input_block(&alloc::format!("label-independence loss ({mode:?}, classification)"), &[logits.clone()], cfg, |g, v| {
                let p = g.softmax_rows(v[0]);
                losses::ucorr_loss(g, p, &classes, cls, mode).expect("valid").loss
            }));
        }
        let sets: Vec<Matrix> = (0..3).map(|_| random(&mut rng, BATCH, D_MODEL).scale(0.8)).collect();
        out.push(input_block("similarity loss (CMD)", &sets, cfg, |g, v| {
            losses::sim_loss(g, [v[0], v[1], v[2]], 5, CmdBounds::Fixed { a: -1.0, b: 1.0 }).expect("valid")
        }));
        let others: Vec<Matrix> = (0..3).map(|_| random(&mut rng, BATCH, D_MODEL)).collect();
        for kernel in [HsicKernel::Rbf, HsicKernel::NormProduct] {
            let opts = HsicOptions::fixed(1.0, kernel);
            out.push(input_block(&alloc::format!("inter-modality independence ({kernel:?})"), &sets, cfg, |g, v| {
                losses::inter_independence_loss(g, [v[0], v[1], v[2]], &opts).expect("valid")
            }));
            let both: Vec<Matrix> = sets.iter().chain(&others).cloned().collect();
            out.push(input_block(&alloc::format!("intra-modality exclusivity ({kernel:?})"), &both, cfg, |g, v| {
                losses::intra_exclusive_loss(g, [v[0], v[1], v[2]], [v[3], v[4], v[5]], &opts).expect("valid")
            }));
        }
        out.push(input_block("reconstruction loss", &[sets[0].clone(), others[0].clone()], cfg, |g, v| {
            losses::recon_loss(g, v[0], v[1]).expect("valid")
        }));

        // The assembled network. Composition through two encoder layers,
        // the disentangler and fusion has a large third derivative, so these
        // checks use the smaller step where truncation error stays near 1e-6.
        let composed = GradCheckConfig { step: COMPOSED_STEP, ..cfg };
        {
            let (store, model) = assembled(&model_cfg, &mut rng, false);
            out.push(param_block("model, stage one", &store, composed, |g| {
                let o = model.forward_stage1(g, &b, &mut Ctx::eval()).expect("shapes match");
                losses::task_loss(g, o.prediction, &b.labels, Task::Regression).expect("valid")
            }));
        }
        {
            let (store, model) = assembled(&model_cfg, &mut rng, true);
            let w = model_cfg.losses.weights.ucorr;
            out.push(param_block("model, stage two total without label independence", &store, composed, |g| {
                let o = model.forward_stage2(g, &b, &mut Ctx::eval()).expect("shapes match");
                let l = model.stage2_losses(g, &o, &b.labels).expect("valid");
                let part = g.scale(l.vars.ucorr, w);
                g.sub(l.total, part)
            }));
            // The prediction head is a constant on this path, so it is left out.
            let held: usize = store.iter().filter(|(_, n, _)| n.starts_with(HEAD_PREFIX)).map(|(_, _, m)| m.len()).sum();
            out.push(BlockCheck {
                name: "model, label-independence path".into(),
                report: check_params_where(&store, |g| ucorr_of(&model, g, &b), composed, |n| !n.starts_with(HEAD_PREFIX)),
                expected: store.numel() - held,
            });
        }
        out
    }

    /// Step for the checks of the assembled network.
    pub const COMPOSED_STEP: f64 = 1e-5;

    const HEAD_PREFIX: &str = "fusion.predict.";

    fn assembled(cfg: &ModelConfig, rng: &mut ChaCha8Rng, stage_two: bool) -> (ParamStore, Model) {
        let mut store = ParamStore::new();
        let mut model = Model::new(&mut store, cfg, Task::Regression, INPUT_DIMS, rng).expect("valid config");
        if stage_two {
            model.attach_disentangler(&mut store, rng).expect("first attach");
        }
        (store, model)
    }

    fn ucorr_of(model: &Model, g: &mut Graph, b: &UtteranceBatch) -> Var {
        let o = model.forward_stage2(g, b, &mut Ctx::eval()).expect("shapes match");
        model.stage2_losses(g, &o, &b.labels).expect("valid").vars.ucorr
    }

    /// Largest gradient magnitude that the label-independence term sends into
    /// the prediction head's parameters. The head is held fixed on that path,
    /// so anything but zero is a leak.
    pub fn head_gradient_leak(seed: u64) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let b = batch(&mut rng);
        let (store, model) = assembled(&config(), &mut rng, true);
        let mut g = Graph::new(&store);
        let loss = ucorr_of(&model, &mut g, &b);
        let grads = g.backward(loss).param_grads(&store);
        grads
            .iter()
            .filter(|(pid, _)| store.name(*pid).starts_with(HEAD_PREFIX))
            .flat_map(|(_, m)| m.data().iter().map(|v| v.abs()))
            .fold(0.0, f64::max)
    }

    /// Names of the checks whose error reaches `tol` or that skipped scalars.
    pub fn failures(checks: &[BlockCheck], tol: f64) -> Vec<String> {
        checks
            .iter()
            .filter(|c| !(c.report.max_rel_error < tol) || !c.complete())
            .map(|c| alloc::format!("{} (max rel error {:.3e} at {}, {}/{} checked)", c.name, c.report.max_rel_error, c.report.worst, c.report.checked, c.expected))
            .collect()
    }
}
