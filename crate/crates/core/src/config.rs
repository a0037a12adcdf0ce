//! Experiment configuration, bundled presets and weight-grid expansion.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::data::{SplitSizes, SyntheticSpec};
use crate::error::{bail, Result};
use crate::Task;

pub const CONFIG_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PerEncoder {
    pub text: usize,
    pub audio: usize,
    pub visual: usize,
    pub shared: usize,
}

impl PerEncoder {
    pub fn modality(&self, m: crate::Modality) -> usize {
        match m {
            crate::Modality::Text => self.text,
            crate::Modality::Audio => self.audio,
            crate::Modality::Visual => self.visual,
        }
    }

    fn all(&self) -> [usize; 4] {
        [self.text, self.audio, self.visual, self.shared]
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    #[default]
    MeanMasked,
    FirstToken,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub d_model: usize,
    pub layers: PerEncoder,
    pub heads: PerEncoder,
    pub ffn_mult: usize,
    pub dropout: f64,
    #[serde(default)]
    pub pooling: Pooling,
    /// Temporal kernel of the input convolution (odd).
    #[serde(default = "default_conv_kernel")]
    pub conv_kernel: usize,
}

fn default_conv_kernel() -> usize {
    1
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 {
            bail!(Config, "d_model must be positive");
        }
        if let Some(h) = self.heads.all().into_iter().find(|&h| h == 0 || self.d_model % h != 0) {
            bail!(Config, "d_model {} is not divisible by head count {h}", self.d_model);
        }
        if self.layers.all().contains(&0) {
            bail!(Config, "every encoder needs at least one layer, got {:?}", self.layers);
        }
        if self.ffn_mult == 0 {
            bail!(Config, "ffn_mult must be positive");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            bail!(Config, "dropout must lie in [0, 1), got {}", self.dropout);
        }
        if self.conv_kernel % 2 == 0 {
            bail!(Config, "conv_kernel must be odd, got {}", self.conv_kernel);
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DisentanglerConfig {
    /// Number of tokens each pooled vector is split into for the dual-output attention.
    pub tokens: usize,
    /// Hidden width of the reconstruction decoder; `None` means `2 * d_model`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub decoder_hidden: Option<usize>,
}

impl Default for DisentanglerConfig {
    fn default() -> Self {
        Self { tokens: 8, decoder_hidden: None }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub task: f64,
    pub sim: f64,
    pub ucorr: f64,
    pub recon: f64,
    pub modality: f64,
    pub h: f64,
}

impl LossWeights {
    pub const MOSI: LossWeights = LossWeights { task: 1.0, sim: 0.1, ucorr: 0.8, recon: 0.2, modality: 0.05, h: 1.0 };
    pub const MOSEI: LossWeights = LossWeights { task: 1.0, sim: 0.05, ucorr: 0.5, recon: 0.15, modality: 0.03, h: 0.8 };
    pub const UR_FUNNY: LossWeights = LossWeights { task: 1.0, sim: 0.1, ucorr: 0.3, recon: 0.2, modality: 0.05, h: 0.8 };
    pub const MELD: LossWeights = LossWeights { task: 1.0, sim: 0.1, ucorr: 0.3, recon: 0.2, modality: 0.05, h: 0.8 };

    pub fn validate(&self) -> Result<()> {
        let all = [self.task, self.sim, self.ucorr, self.recon, self.modality, self.h];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            bail!(Config, "loss weights must be finite and nonnegative, got {self:?}");
        }
        if self.task <= 0.0 {
            bail!(Config, "task weight must be positive");
        }
        Ok(())
    }
}

impl Default for LossWeights {
    fn default() -> Self {
        Self::MOSI
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UcorrMode {
    /// Squared correlation (regression) or KL divergence to uniform (classification).
    #[default]
    Independence,
    /// Signed correlation (regression) or mean true-class log-probability (classification).
    SignedCorrelation,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HsicKernel {
    /// `exp(-|z_i - z_j|^2 / 2 sigma^2)`.
    #[default]
    Rbf,
    /// `exp(-|z_i| |z_j| / 2 sigma^2)`.
    NormProduct,
}

/// How the HSIC kernel width is chosen.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HsicBandwidth {
    /// Per sample set, `sigma` times the median pairwise kernel argument
    /// (held constant for gradients), so the penalty cannot be lowered by
    /// shrinking a representation.
    #[default]
    Median,
    /// `sigma` as given.
    Fixed,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum CmdBounds {
    /// Per call, the minimum and maximum over both sample sets (held constant for gradients).
    #[default]
    Empirical,
    /// Fixed interval; samples outside it are clamped.
    Fixed { a: f64, b: f64 },
}

/// Missing keys take the values of [`LossConfig::default`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub weights: LossWeights,
    pub ucorr_mode: UcorrMode,
    pub hsic_kernel: HsicKernel,
    pub hsic_bandwidth: HsicBandwidth,
    pub sigma: f64,
    pub cmd_order: usize,
    #[serde(default)]
    pub cmd_bounds: CmdBounds,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            weights: LossWeights::MOSI,
            ucorr_mode: UcorrMode::Independence,
            hsic_kernel: HsicKernel::Rbf,
            hsic_bandwidth: HsicBandwidth::Median,
            sigma: 1.0,
            cmd_order: 5,
            cmd_bounds: CmdBounds::Empirical,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            bail!(Config, "HSIC bandwidth must be positive, got {}", self.sigma);
        }
        if self.cmd_order == 0 {
            bail!(Config, "CMD order must be at least 1");
        }
        if let CmdBounds::Fixed { a, b } = self.cmd_bounds {
            if !(b > a) {
                bail!(Config, "CMD bounds need b > a, got ({a}, {b})");
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiscriminatorMode {
    #[default]
    Shared,
    PerModality,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FusionConfig {
    pub heads: usize,
    #[serde(default)]
    pub discriminator: DiscriminatorMode,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self { heads: 4, discriminator: DiscriminatorMode::Shared }
    }
}

/// Everything needed to build the network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    #[serde(default)]
    pub disentangler: DisentanglerConfig,
    #[serde(default)]
    pub fusion: FusionConfig,
    #[serde(default)]
    pub losses: LossConfig,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        let d = self.encoder.d_model;
        let h = self.disentangler.tokens;
        if h == 0 || d % h != 0 {
            bail!(Config, "d_model {d} is not divisible by {h} disentangler tokens");
        }
        if self.disentangler.decoder_hidden == Some(0) {
            bail!(Config, "decoder hidden width must be positive");
        }
        if self.fusion.heads == 0 || d % self.fusion.heads != 0 {
            bail!(Config, "d_model {d} is not divisible by {} fusion heads", self.fusion.heads);
        }
        self.losses.validate()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSchedule {
    pub stage1_epochs: usize,
    pub stage2_epochs: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    /// Seed of the first stage (initialization and batch order).
    pub stage1_seed: u64,
    /// One second-stage run per seed.
    pub seeds: Vec<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grad_clip: Option<f64>,
}

impl TrainSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.stage2_epochs == 0 {
            bail!(Config, "stage2_epochs must be at least 1");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            bail!(Config, "learning rate must be positive");
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            bail!(Config, "weight decay must be nonnegative");
        }
        if self.batch_size == 0 {
            bail!(Config, "batch size must be positive");
        }
        if self.seeds.is_empty() {
            bail!(Config, "at least one second-stage seed is required");
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                bail!(Config, "grad_clip must be positive");
            }
        }
        Ok(())
    }
}

/// Missing keys take the values of [`ProbeConfig::default`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    /// Hidden width; `None` means `d_model`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hidden: Option<usize>,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self { hidden: None, epochs: 50, learning_rate: 1e-3, batch_size: 64, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", deny_unknown_fields)]
pub enum DatasetConfig {
    Synthetic { spec: SyntheticSpec, splits: SplitSizes },
    /// Paths to manifests, relative to the config file.
    Manifest {
        train: String,
        valid: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        test: Option<String>,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub version: u32,
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    pub train: TrainSchedule,
    #[serde(default)]
    pub probe: ProbeConfig,
    /// Loss-weight grid explored by the sweep command.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<WeightGrid>,
    pub output_dir: String,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            bail!(Config, "unsupported config version {} (expected {CONFIG_VERSION})", self.version);
        }
        if let DatasetConfig::Synthetic { spec, splits } = &self.dataset {
            spec.validate()?;
            if splits.total() != spec.num_samples {
                bail!(Config, "split sizes {splits:?} do not add up to num_samples {}", spec.num_samples);
            }
            if splits.train == 0 || splits.valid == 0 {
                bail!(Config, "train and valid splits must be nonempty");
            }
        }
        if self.output_dir.is_empty() {
            bail!(Config, "output_dir must be set");
        }
        if let Some(grid) = &self.sweep {
            grid.expand(self.model.losses.weights)?;
        }
        self.model.validate()?;
        self.train.validate()
    }

    pub fn preset(name: &str) -> Option<Self> {
        Preset::from_name(name).map(Preset::config)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    Synthetic,
    Mosi,
    Mosei,
    UrFunny,
    Meld,
}

impl Preset {
    pub const ALL: [Preset; 5] = [Preset::Synthetic, Preset::Mosi, Preset::Mosei, Preset::UrFunny, Preset::Meld];

    pub fn name(self) -> &'static str {
        match self {
            Preset::Synthetic => "synthetic",
            Preset::Mosi => "mosi",
            Preset::Mosei => "mosei",
            Preset::UrFunny => "ur_funny",
            Preset::Meld => "meld",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|p| p.name() == name)
    }

    /// Task of the datasets the preset targets.
    pub fn task(self) -> Task {
        match self {
            Preset::Synthetic | Preset::Mosi | Preset::Mosei => Task::Regression,
            Preset::UrFunny => Task::Classification { num_classes: 2 },
            Preset::Meld => Task::Classification { num_classes: 6 },
        }
    }

    pub fn config(self) -> ExperimentConfig {
        if self == Preset::Synthetic {
            return synthetic_preset();
        }
        let (lr, batch, d_model, weights, epochs) = match self {
            Preset::Mosi => (8e-5, 64, 128, LossWeights::MOSI, 40),
            Preset::Mosei => (2e-5, 24, 256, LossWeights::MOSEI, 15),
            Preset::UrFunny => (1e-5, 32, 256, LossWeights::UR_FUNNY, 15),
            Preset::Meld => (1e-5, 32, 256, LossWeights::MELD, 15),
            Preset::Synthetic => unreachable!(),
        };
        let name = self.name();
        ExperimentConfig {
            version: CONFIG_VERSION,
            dataset: DatasetConfig::Manifest {
                train: alloc::format!("{name}/train.manifest"),
                valid: alloc::format!("{name}/valid.manifest"),
                test: Some(alloc::format!("{name}/test.manifest")),
            },
            model: ModelConfig {
                encoder: EncoderConfig {
                    d_model,
                    layers: PerEncoder { text: 4, audio: 2, visual: 2, shared: 4 },
                    heads: PerEncoder { text: 8, audio: 4, visual: 4, shared: 4 },
                    ffn_mult: 4,
                    dropout: 0.1,
                    pooling: Pooling::MeanMasked,
                    conv_kernel: 1,
                },
                disentangler: DisentanglerConfig::default(),
                fusion: FusionConfig::default(),
                losses: LossConfig { weights, ..LossConfig::default() },
            },
            train: TrainSchedule {
                stage1_epochs: 10,
                stage2_epochs: epochs,
                learning_rate: lr,
                weight_decay: 5e-5,
                batch_size: batch,
                stage1_seed: 0,
                seeds: vec![1, 2, 3, 4, 5],
                grad_clip: None,
            },
            probe: ProbeConfig::default(),
            sweep: None,
            output_dir: alloc::format!("runs/{name}"),
        }
    }
}

fn synthetic_preset() -> ExperimentConfig {
    let splits = SplitSizes { train: 5000, valid: 500, test: 1000 };
    ExperimentConfig {
        version: CONFIG_VERSION,
        dataset: DatasetConfig::Synthetic {
            spec: SyntheticSpec { num_samples: splits.total(), ..SyntheticSpec::default() },
            splits,
        },
        model: ModelConfig {
            encoder: EncoderConfig {
                d_model: 16,
                layers: PerEncoder { text: 1, audio: 1, visual: 1, shared: 1 },
                heads: PerEncoder { text: 2, audio: 2, visual: 2, shared: 2 },
                ffn_mult: 2,
                dropout: 0.0,
                pooling: Pooling::MeanMasked,
                conv_kernel: 1,
            },
            disentangler: DisentanglerConfig::default(),
            fusion: FusionConfig::default(),
            losses: LossConfig::default(),
        },
        train: TrainSchedule {
            stage1_epochs: 5,
            stage2_epochs: 25,
            learning_rate: 1e-3,
            weight_decay: 5e-5,
            batch_size: 64,
            stage1_seed: 0,
            seeds: vec![1],
            grad_clip: None,
        },
        probe: ProbeConfig::default(),
        sweep: None,
        output_dir: String::from("runs/synthetic"),
    }
}

/// Candidate values for each loss weight; `None` keeps the base value.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeightGrid {
    #[serde(default)]
    pub task: Option<Vec<f64>>,
    #[serde(default)]
    pub sim: Option<Vec<f64>>,
    #[serde(default)]
    pub ucorr: Option<Vec<f64>>,
    #[serde(default)]
    pub recon: Option<Vec<f64>>,
    #[serde(default)]
    pub modality: Option<Vec<f64>>,
    #[serde(default)]
    pub h: Option<Vec<f64>>,
}

impl WeightGrid {
    /// Cartesian product of the listed values applied to `base`, in
    /// lexicographic order (task, sim, ucorr, recon, modality, h).
    pub fn expand(&self, base: LossWeights) -> Result<Vec<LossWeights>> {
        let axis = |v: &Option<Vec<f64>>, b: f64| -> Result<Vec<f64>> {
            match v {
                None => Ok(vec![b]),
                Some(v) if v.is_empty() => bail!(Config, "grid axis with no values"),
                Some(v) => Ok(v.clone()),
            }
        };
        let axes = [
            axis(&self.task, base.task)?,
            axis(&self.sim, base.sim)?,
            axis(&self.ucorr, base.ucorr)?,
            axis(&self.recon, base.recon)?,
            axis(&self.modality, base.modality)?,
            axis(&self.h, base.h)?,
        ];
        let mut out = vec![base];
        for (k, values) in axes.iter().enumerate() {
            let mut next = Vec::with_capacity(out.len() * values.len());
            for w in &out {
                for &v in values {
                    let mut w = *w;
                    match k {
                        0 => w.task = v,
                        1 => w.sim = v,
                        2 => w.ucorr = v,
                        3 => w.recon = v,
                        4 => w.modality = v,
                        _ => w.h = v,
                    }
                    next.push(w);
                }
            }
            out = next;
        }
        for w in &out {
            w.validate()?;
        }
        Ok(out)
    }
}
