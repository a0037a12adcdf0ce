//! The assembled network and its two forward modes.
//!
//! The first stage runs encoder, fusion and prediction head with the three
//! pooled vectors as fusion tokens. The second stage inserts the
//! disentangler between encoder and fusion, fuses `r*` and `r∩u` of every
//! modality, and adds the modality discriminator.

use alloc::string::String;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::ModelConfig;
use crate::data::UtteranceBatch;
use crate::disentangler::{Disentangled, Disentangler};
use crate::encoder::{Ctx, EncodedModality, Encoder};
use crate::error::{bail, Result};
use crate::fusion::{Discriminator, Fusion};
use crate::graph::{Graph, Var};
use crate::losses::{self, LossVars};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Matrix;
use crate::{Modality, Task};

/// Name prefixes of the parameters that only exist in the second stage.
pub const STAGE2_PREFIXES: [&str; 2] = ["disentangler.", "discriminator"];

#[derive(Clone, Debug)]
pub struct Model {
    cfg: ModelConfig,
    task: Task,
    input_dims: [usize; 3],
    pub encoder: Encoder,
    pub fusion: Fusion,
    pub disentangler: Option<Disentangler>,
    pub discriminator: Option<Discriminator>,
}

/// First-stage forward pass.
#[derive(Clone, Copy, Debug)]
pub struct Stage1Output {
    pub encoded: [EncodedModality; 3],
    pub fusion_attention: Var,
    pub prediction: Var,
}

/// Second-stage forward pass.
#[derive(Clone, Copy, Debug)]
pub struct Stage2Output {
    pub encoded: [EncodedModality; 3],
    pub parts: [Disentangled; 3],
    pub fusion_attention: Var,
    pub prediction: Var,
    /// Predictions of the frozen head applied to each modality's `u*`.
    pub u_predictions: [Var; 3],
    pub modality_probs: [Var; 3],
}

/// Loss nodes of one second-stage step.
#[derive(Clone, Copy, Debug)]
pub struct StepLosses {
    pub vars: LossVars,
    pub total: Var,
    /// Number of modalities whose label-independence term was undefined.
    pub ucorr_degenerate: usize,
}

impl Model {
    /// Builds the first-stage network.
    pub fn new(store: &mut ParamStore, cfg: &ModelConfig, task: Task, input_dims: [usize; 3], rng: &mut ChaCha8Rng) -> Result<Self> {
        cfg.validate()?;
        if input_dims.contains(&0) {
            bail!(Validation, "input dimensions must be positive, got {input_dims:?}");
        }
        let encoder = Encoder::new(store, &cfg.encoder, input_dims, rng)?;
        let fusion = Fusion::new(store, &cfg.fusion, cfg.encoder.d_model, task, rng)?;
        Ok(Self { cfg: cfg.clone(), task, input_dims, encoder, fusion, disentangler: None, discriminator: None })
    }

    /// Adds the disentangler and discriminator parameters.
    pub fn attach_disentangler(&mut self, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<()> {
        if self.disentangler.is_some() {
            bail!(Precondition, "the disentangler is already attached");
        }
        let d = self.cfg.encoder.d_model;
        self.disentangler = Some(Disentangler::new(store, &self.cfg.disentangler, d, rng)?);
        self.discriminator = Some(Discriminator::new(store, self.cfg.fusion.discriminator, d, rng));
        Ok(())
    }

    /// Recreates the layout that produced `saved` and loads its values.
    /// Every saved tensor must be used and every model tensor must be present.
    pub fn restore(cfg: &ModelConfig, task: Task, input_dims: [usize; 3], saved: &ParamStore) -> Result<(Self, ParamStore)> {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut model = Self::new(&mut store, cfg, task, input_dims, &mut rng)?;
        let has_stage2 = saved.iter().any(|(_, n, _)| STAGE2_PREFIXES.iter().any(|p| n.starts_with(p)));
        if has_stage2 {
            model.attach_disentangler(&mut store, &mut rng)?;
        }
        for (_, name, value) in store.iter() {
            match saved.id_of(name) {
                None => bail!(Schema, "saved parameters lack {name}"),
                Some(id) if saved.get(id).shape() != value.shape() => {
                    bail!(Schema, "parameter {name} has shape {:?}, expected {:?}", saved.get(id).shape(), value.shape())
                }
                Some(_) => {}
            }
        }
        if saved.len() != store.len() {
            let extra: Vec<String> = saved.iter().filter(|(_, n, _)| store.id_of(n).is_none()).map(|(_, n, _)| n.into()).collect();
            bail!(Schema, "saved parameters not used by this model: {extra:?}");
        }
        store.copy_matching_from(saved);
        Ok((model, store))
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn task(&self) -> Task {
        self.task
    }

    pub fn input_dims(&self) -> [usize; 3] {
        self.input_dims
    }

    pub fn d_model(&self) -> usize {
        self.cfg.encoder.d_model
    }

    pub fn has_disentangler(&self) -> bool {
        self.disentangler.is_some()
    }

    /// Parameters trained in the first stage: everything except the
    /// disentangler and discriminator.
    pub fn stage1_param_ids(&self, store: &ParamStore) -> Vec<ParamId> {
        store.iter().filter(|(_, n, _)| !STAGE2_PREFIXES.iter().any(|p| n.starts_with(p))).map(|(id, _, _)| id).collect()
    }

    fn check_batch(&self, batch: &UtteranceBatch) -> Result<()> {
        if batch.size() == 0 {
            bail!(Validation, "empty batch");
        }
        for m in Modality::ALL {
            let dim = batch.modality(m).values.cols();
            if dim != self.input_dims[m.index()] {
                bail!(Shape, "{m} features have dimension {dim}, the model expects {}", self.input_dims[m.index()]);
            }
        }
        Ok(())
    }

    fn encode(&self, g: &mut Graph, batch: &UtteranceBatch, ctx: &mut Ctx) -> Result<[EncodedModality; 3]> {
        self.check_batch(batch)?;
        let inputs = Modality::ALL.map(|m| batch.modality(m));
        self.encoder.forward(g, inputs, ctx)
    }

    pub fn forward_stage1(&self, g: &mut Graph, batch: &UtteranceBatch, ctx: &mut Ctx) -> Result<Stage1Output> {
        let encoded = self.encode(g, batch, ctx)?;
        let tokens = g.interleave_rows(&encoded.map(|e| e.pooled));
        let fused = self.fusion.fuse(g, tokens, batch.size(), 3)?;
        let prediction = self.fusion.predict(g, fused.fused, self.task);
        Ok(Stage1Output { encoded, fusion_attention: fused.attention, prediction })
    }

    pub fn forward_stage2(&self, g: &mut Graph, batch: &UtteranceBatch, ctx: &mut Ctx) -> Result<Stage2Output> {
        let (Some(dis), Some(disc)) = (&self.disentangler, &self.discriminator) else {
            bail!(Precondition, "the second-stage forward needs the disentangler");
        };
        let encoded = self.encode(g, batch, ctx)?;
        let mut parts = Vec::with_capacity(3);
        for m in Modality::ALL {
            parts.push(dis.forward(g, m, encoded[m.index()].pooled)?);
        }
        let parts: [Disentangled; 3] = [parts[0], parts[1], parts[2]];
        let mut token_list = [parts[0].r_star; 6];
        for m in Modality::ALL {
            token_list[m.index()] = parts[m.index()].r_star;
            token_list[3 + m.index()] = parts[m.index()].r_cap_u;
        }
        let tokens = g.interleave_rows(&token_list);
        let fused = self.fusion.fuse(g, tokens, batch.size(), 6)?;
        let prediction = self.fusion.predict(g, fused.fused, self.task);
        let u_predictions = parts.map(|p| self.fusion.predict_frozen(g, p.u_star, self.task));
        let mut modality_probs = [prediction; 3];
        for m in Modality::ALL {
            let p = &parts[m.index()];
            modality_probs[m.index()] = disc.discriminate(g, m, p.u_star, p.r_cap_u)?;
        }
        Ok(Stage2Output { encoded, parts, fusion_attention: fused.attention, prediction, u_predictions, modality_probs })
    }

    /// The seven loss terms of the second stage and their weighted total.
    ///
    /// Terms that need two samples (correlation and HSIC) are zero on a
    /// single-sample batch.
    pub fn stage2_losses(&self, g: &mut Graph, out: &Stage2Output, labels: &[f64]) -> Result<StepLosses> {
        let lc = &self.cfg.losses;
        let task = losses::task_loss(g, out.prediction, labels, self.task)?;

        let mut terms = Vec::with_capacity(3);
        for m in Modality::ALL {
            terms.push(losses::modality_loss(g, out.modality_probs[m.index()], m)?);
        }
        let modality = losses::mean_of(g, &terms);

        let r_star = out.parts.map(|p| p.r_star);
        let r_cap_u = out.parts.map(|p| p.r_cap_u);
        let u_star = out.parts.map(|p| p.u_star);
        let mut ucorr_degenerate = 0;
        let (ucorr, h_inter, h_intra) = if labels.len() >= 2 {
            terms.clear();
            for m in Modality::ALL {
                let u = losses::ucorr_loss(g, out.u_predictions[m.index()], labels, self.task, lc.ucorr_mode)?;
                ucorr_degenerate += usize::from(u.degenerate);
                terms.push(u.loss);
            }
            let ucorr = losses::mean_of(g, &terms);
            let opts = losses::HsicOptions { sigma: lc.sigma, kernel: lc.hsic_kernel, bandwidth: lc.hsic_bandwidth };
            let h_inter = losses::inter_independence_loss(g, r_cap_u, &opts)?;
            let h_intra = losses::intra_exclusive_loss(g, r_star, u_star, &opts)?;
            (ucorr, h_inter, h_intra)
        } else {
            let z = g.constant(Matrix::scalar(0.0));
            ucorr_degenerate = 3;
            (z, z, z)
        };
        let sim = losses::sim_loss(g, r_star, lc.cmd_order, lc.cmd_bounds)?;

        terms.clear();
        for m in Modality::ALL {
            let p = &out.parts[m.index()];
            terms.push(losses::recon_loss(g, p.reconstruction, out.encoded[m.index()].pooled)?);
        }
        let recon = losses::mean_of(g, &terms);

        let vars = LossVars { task, modality, ucorr, sim, h_inter, h_intra, recon };
        let total = vars.weighted_total(g, &lc.weights);
        Ok(StepLosses { vars, total, ucorr_degenerate })
    }

    /// Evaluation-mode predictions (`batch x output_width`), using the
    /// second-stage path when the disentangler is attached.
    pub fn predict(&self, store: &ParamStore, batch: &UtteranceBatch) -> Result<Matrix> {
        let mut g = Graph::new(store);
        let mut ctx = Ctx::eval();
        let pred = if self.has_disentangler() {
            self.forward_stage2(&mut g, batch, &mut ctx)?.prediction
        } else {
            self.forward_stage1(&mut g, batch, &mut ctx)?.prediction
        };
        Ok(g.value(pred).clone())
    }
}

/// Turns prediction rows into scalar outputs: the value for regression, the
/// arg-max class for classification.
pub fn decode_predictions(pred: &Matrix, task: Task) -> Vec<f64> {
    match task {
        Task::Regression => pred.data().to_vec(),
        Task::Classification { .. } => (0..pred.rows())
            .map(|r| {
                let row = pred.row(r);
                let mut best = 0;
                for (i, v) in row.iter().enumerate() {
                    if *v > row[best] {
                        best = i;
                    }
                }
                best as f64
            })
            .collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{EncoderConfig, PerEncoder, Pooling};
    use crate::data::{generate_synthetic, SyntheticSpec};

    pub(crate) fn tiny_config() -> ModelConfig {
        ModelConfig {
            encoder: EncoderConfig {
                d_model: 8,
                layers: PerEncoder { text: 1, audio: 1, visual: 1, shared: 1 },
                heads: PerEncoder { text: 2, audio: 2, visual: 2, shared: 2 },
                ffn_mult: 2,
                dropout: 0.0,
                pooling: Pooling::MeanMasked,
                conv_kernel: 1,
            },
            disentangler: crate::config::DisentanglerConfig { tokens: 4, decoder_hidden: None },
            fusion: crate::config::FusionConfig { heads: 2, ..Default::default() },
            losses: Default::default(),
        }
    }

    fn batch() -> (UtteranceBatch, [usize; 3]) {
        let spec = SyntheticSpec { num_samples: 4, ..SyntheticSpec::default() };
        let data = generate_synthetic(&spec).unwrap();
        let refs: Vec<_> = data.records.iter().collect();
        (UtteranceBatch::from_records(&refs).unwrap(), spec.feature_dims)
    }

    #[test]
    fn stage2_forward_and_losses() {
        let (b, dims) = batch();
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut model = Model::new(&mut store, &tiny_config(), Task::Regression, dims, &mut rng).unwrap();
        let stage1 = store.len();
        model.attach_disentangler(&mut store, &mut rng).unwrap();
        assert!(store.len() > stage1);
        assert_eq!(model.stage1_param_ids(&store).len(), stage1);
        let mut g = Graph::new(&store);
        let out = model.forward_stage2(&mut g, &b, &mut Ctx::eval()).unwrap();
        assert_eq!(g.shape(out.prediction), (4, 1));
        let attn = g.attention_probs(out.fusion_attention).unwrap();
        assert_eq!(attn.len(), 4 * 2 * 36);
        let l = model.stage2_losses(&mut g, &out, &b.labels).unwrap();
        let report = losses::total_loss(l.vars.components(&g), &model.config().losses.weights).unwrap();
        losses::check_decomposition(&report, g.scalar(l.total)).unwrap();
    }

    #[test]
    fn restore_round_trips_layout() {
        let (b, dims) = batch();
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut model = Model::new(&mut store, &tiny_config(), Task::Regression, dims, &mut rng).unwrap();
        model.attach_disentangler(&mut store, &mut rng).unwrap();
        let (again, restored) = Model::restore(&tiny_config(), Task::Regression, dims, &store).unwrap();
        assert_eq!(restored, store);
        assert_eq!(again.predict(&restored, &b).unwrap(), model.predict(&store, &b).unwrap());
        let mut extra = store.clone();
        extra.add("stray", Matrix::zeros(1, 1));
        assert!(Model::restore(&tiny_config(), Task::Regression, dims, &extra).is_err());
    }

    #[test]
    fn decode_argmax() {
        let p = Matrix::from_rows(&[[0.1, 0.7, 0.2], [0.5, 0.2, 0.3]]);
        assert_eq!(decode_predictions(&p, Task::Classification { num_classes: 3 }), [1.0, 0.0]);
    }
}
