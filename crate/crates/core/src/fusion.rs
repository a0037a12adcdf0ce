//! Attention fusion over the per-modality representations, the prediction
//! head and the modality discriminator.
//!
//! In the full model each sample contributes six tokens in the order of
//! [`FUSION_LABELS`]. The tokens form a set: no positional information is
//! added, so the pooled output is invariant to permuting them.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::config::{DiscriminatorMode, FusionConfig};
use crate::error::{bail, Result};
use crate::graph::{AttentionShape, Graph, Var};
use crate::nn::Linear;
use crate::params::ParamStore;
use crate::tensor::Matrix;
use crate::{Modality, Task};

/// Row and column labels of the six-token fusion attention.
pub const FUSION_LABELS: [&str; 6] = ["r_star.t", "r_star.a", "r_star.v", "r_cap_u.t", "r_cap_u.a", "r_cap_u.v"];

/// Labels of the three-token fusion used before the disentangler exists.
pub const STAGE1_LABELS: [&str; 3] = ["x_hat.t", "x_hat.a", "x_hat.v"];

/// Output of [`Fusion::fuse`].
#[derive(Clone, Copy, Debug)]
pub struct Fused {
    /// `batch x d_model`.
    pub fused: Var,
    /// Attention node; probabilities via [`Graph::attention_probs`].
    pub attention: Var,
}

/// One multi-head self-attention layer with a residual connection followed by
/// mean pooling over tokens, and the prediction head on top.
#[derive(Clone, Debug)]
pub struct Fusion {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    heads: usize,
    d_model: usize,
    pub head: Linear,
}

impl Fusion {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, cfg: &FusionConfig, d_model: usize, task: Task, rng: &mut R) -> Result<Self> {
        if cfg.heads == 0 || d_model % cfg.heads != 0 {
            bail!(Config, "fusion heads {} do not divide d_model {d_model}", cfg.heads);
        }
        Ok(Self {
            q: Linear::new(store, "fusion.attn.q", d_model, d_model, rng),
            k: Linear::new(store, "fusion.attn.k", d_model, d_model, rng),
            v: Linear::new(store, "fusion.attn.v", d_model, d_model, rng),
            o: Linear::new(store, "fusion.attn.o", d_model, d_model, rng),
            heads: cfg.heads,
            d_model,
            head: Linear::new(store, "fusion.predict", d_model, task.output_width(), rng),
        })
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn out_projection(&self) -> Linear {
        self.o
    }

    /// `tokens` is `(batch * n) x d_model` with each sample's `n` tokens
    /// stored consecutively.
    pub fn fuse(&self, g: &mut Graph, tokens: Var, batch: usize, n: usize) -> Result<Fused> {
        let (rows, cols) = g.shape(tokens);
        if rows != batch * n || cols != self.d_model || n == 0 {
            bail!(Shape, "fusion expects {batch} x {n} tokens of width {}, got {rows} x {cols}", self.d_model);
        }
        let q = self.q.forward(g, tokens);
        let k = self.k.forward(g, tokens);
        let v = self.v.forward(g, tokens);
        let shape = AttentionShape { batch, q_len: n, k_len: n, heads: self.heads };
        let attention = g.attention(q, k, v, shape, None);
        let out = self.o.forward(g, attention);
        let x = g.add(tokens, out);
        let fused = g.group_mean(x, n, None);
        Ok(Fused { fused, attention })
    }

    /// Prediction head: a scalar per sample for regression, class
    /// probabilities for classification.
    pub fn predict(&self, g: &mut Graph, fused: Var, task: Task) -> Var {
        let y = self.head.forward(g, fused);
        finish_prediction(g, y, task)
    }

    /// The same head with its parameters held fixed.
    pub fn predict_frozen(&self, g: &mut Graph, x: Var, task: Task) -> Var {
        let y = self.head.forward_detached(g, x);
        finish_prediction(g, y, task)
    }
}

fn finish_prediction(g: &mut Graph, y: Var, task: Task) -> Var {
    match task {
        Task::Regression => y,
        Task::Classification { .. } => g.softmax_rows(y),
    }
}

/// Modality discriminator over `[u*, r∩u]`.
#[derive(Clone, Debug)]
pub struct Discriminator {
    layers: Vec<Linear>,
    d_model: usize,
}

impl Discriminator {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, mode: DiscriminatorMode, d_model: usize, rng: &mut R) -> Self {
        let layers = match mode {
            DiscriminatorMode::Shared => vec![Linear::new(store, "discriminator", 2 * d_model, 3, rng)],
            DiscriminatorMode::PerModality => {
                Modality::ALL.iter().map(|m| Linear::new(store, &format!("discriminator.{m}"), 2 * d_model, 3, rng)).collect()
            }
        };
        Self { layers, d_model }
    }

    pub fn layer(&self, m: Modality) -> Linear {
        if self.layers.len() == 1 {
            self.layers[0]
        } else {
            self.layers[m.index()]
        }
    }

    /// `batch x 3` modality probabilities.
    pub fn discriminate(&self, g: &mut Graph, m: Modality, u_star: Var, r_cap_u: Var) -> Result<Var> {
        for x in [u_star, r_cap_u] {
            if g.shape(x).1 != self.d_model {
                bail!(Shape, "discriminator input width {} does not match d_model {}", g.shape(x).1, self.d_model);
            }
        }
        let z = g.concat_cols(&[u_star, r_cap_u]);
        let logits = self.layer(m).forward(g, z);
        Ok(g.softmax_rows(logits))
    }
}

/// Running mean of fusion attention maps.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionTrace {
    pub labels: Vec<String>,
    heads: usize,
    /// `heads x n x n` sums over samples.
    sums: Vec<f64>,
    count: usize,
}

impl AttentionTrace {
    pub fn new(labels: &[&str], heads: usize) -> Self {
        let n = labels.len();
        Self { labels: labels.iter().map(|s| String::from(*s)).collect(), heads, sums: vec![0.0; heads * n * n], count: 0 }
    }

    pub fn tokens(&self) -> usize {
        self.labels.len()
    }

    pub fn count(&self) -> usize {
        self.count
    }

    /// Adds a batch of probabilities laid out `batch x heads x n x n`.
    pub fn add_batch(&mut self, probs: &[f64], batch: usize) -> Result<()> {
        let block = self.sums.len();
        if probs.len() != batch * block {
            bail!(Shape, "attention batch has {} entries, expected {}", probs.len(), batch * block);
        }
        for sample in probs.chunks_exact(block) {
            for (s, p) in self.sums.iter_mut().zip(sample) {
                *s += p;
            }
        }
        self.count += batch;
        Ok(())
    }

    /// Mean attention of one head.
    pub fn head_mean(&self, head: usize) -> Matrix {
        let n = self.tokens();
        let c = self.count.max(1) as f64;
        Matrix::from_vec(n, n, self.sums[head * n * n..(head + 1) * n * n].iter().map(|s| s / c).collect())
    }

    /// Mean attention averaged over heads.
    pub fn mean(&self) -> Matrix {
        let n = self.tokens();
        let mut out = Matrix::zeros(n, n);
        for h in 0..self.heads {
            out.add_assign(&self.head_mean(h));
        }
        out.scale(1.0 / self.heads as f64)
    }

    /// Column sums of [`Self::mean`]: the total attention each token receives.
    pub fn column_sums(&self) -> Vec<f64> {
        self.mean().col_sums().into_vec()
    }
}
