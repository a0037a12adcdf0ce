//! Triple disentanglement of one pooled vector per modality.
//!
//! Two fully-connected branches map `x̂` to a label-relevant `r` and a
//! modality-specific `u` (both `tanh`-bounded). The dual-output attention
//! then splits each of them in two: with `A = softmax(Q_u K_r^T / sqrt(d_k))`
//! the attended part `A V_r` is the intersection seen from `u`, and the
//! complement `(1 - A) V_r` (with `1` the all-ones matrix) is `r*`. The same
//! block with the roles swapped yields `u*`. The two directional
//! intersections are averaged into `r∩u`, and a small decoder reconstructs
//! `x̂` from the three parts.
//!
//! Pooled vectors are cut into `tokens` chunks of width `d_k` before the
//! attention so that `A` is not the trivial `1x1` matrix.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;

use crate::config::DisentanglerConfig;
use crate::error::{bail, Result};
use crate::graph::{AttentionShape, Graph, Var};
use crate::nn::Linear;
use crate::params::{xavier_uniform, ParamId, ParamStore};
use crate::Modality;

/// Projection weights of one dual-output attention block (`d_k x d_k`, no bias).
#[derive(Clone, Copy, Debug)]
pub struct DualAttention {
    pub query_u: ParamId,
    pub key_r: ParamId,
    pub value_r: ParamId,
    pub query_r: ParamId,
    pub key_u: ParamId,
    pub value_u: ParamId,
}

impl DualAttention {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, d_k: usize, rng: &mut R) -> Self {
        let mut w = |n: &str| store.add(format!("{name}.{n}"), xavier_uniform(d_k, d_k, rng));
        Self { query_u: w("query_u"), key_r: w("key_r"), value_r: w("value_r"), query_r: w("query_r"), key_u: w("key_u"), value_u: w("value_u") }
    }
}

/// The four outputs of the dual-output attention, each `batch x d_model`.
#[derive(Clone, Copy, Debug)]
pub struct DualOutput {
    pub r_star: Var,
    /// Intersection attended from `u` into `r`.
    pub r_cap_u_ur: Var,
    pub u_star: Var,
    /// Intersection attended from `r` into `u`.
    pub r_cap_u_ru: Var,
    /// Attention node of the `u -> r` direction (probabilities via [`Graph::attention_probs`]).
    pub attn_ur: Var,
    pub attn_ru: Var,
}

/// Splits `r` and `u` (`batch x d_model`) with the dual-output attention.
pub fn dual_output_attention(g: &mut Graph, w: &DualAttention, r: Var, u: Var, tokens: usize) -> Result<DualOutput> {
    let (batch, d) = g.shape(r);
    if g.shape(u) != (batch, d) {
        bail!(Shape, "r is {:?} but u is {:?}", (batch, d), g.shape(u));
    }
    if tokens == 0 || d % tokens != 0 {
        bail!(Config, "width {d} is not divisible into {tokens} tokens");
    }
    let d_k = d / tokens;
    let rt = g.reshape(r, batch * tokens, d_k);
    let ut = g.reshape(u, batch * tokens, d_k);
    let shape = AttentionShape { batch, q_len: tokens, k_len: tokens, heads: 1 };

    let half = |g: &mut Graph, query_src: Var, kv_src: Var, wq: ParamId, wk: ParamId, wv: ParamId| {
        let (wq, wk, wv) = (g.param(wq), g.param(wk), g.param(wv));
        let q = g.matmul(query_src, wq);
        let k = g.matmul(kv_src, wk);
        let v = g.matmul(kv_src, wv);
        let attended = g.attention(q, k, v, shape, None);
        // (1 - A) V = (column sums of V) - A V, per sample
        let total = g.group_sum_broadcast(v, tokens);
        let complement = g.sub(total, attended);
        (g.reshape(attended, batch, d), g.reshape(complement, batch, d), attended)
    };
    let (r_cap_u_ur, r_star, attn_ur) = half(g, ut, rt, w.query_u, w.key_r, w.value_r);
    let (r_cap_u_ru, u_star, attn_ru) = half(g, rt, ut, w.query_r, w.key_u, w.value_u);
    Ok(DualOutput { r_star, r_cap_u_ur, u_star, r_cap_u_ru, attn_ur, attn_ru })
}

/// Elementwise mean of the two directional intersections.
pub fn combine_intersection(g: &mut Graph, dir_ur: Var, dir_ru: Var) -> Result<Var> {
    if g.shape(dir_ur) != g.shape(dir_ru) {
        bail!(Shape, "intersection shapes differ: {:?} vs {:?}", g.shape(dir_ur), g.shape(dir_ru));
    }
    let s = g.add(dir_ur, dir_ru);
    Ok(g.scale(s, 0.5))
}

/// Per-modality disentangler parameters.
#[derive(Clone, Debug)]
pub struct ModalityDisentangler {
    pub branch_r: Linear,
    pub branch_u: Linear,
    pub attention: DualAttention,
    pub decoder_hidden: Linear,
    pub decoder_out: Linear,
}

/// Everything the disentangler produces for one modality of a batch.
#[derive(Clone, Copy, Debug)]
pub struct Disentangled {
    pub modality: Modality,
    pub r: Var,
    pub u: Var,
    pub r_star: Var,
    pub r_cap_u: Var,
    pub u_star: Var,
    pub reconstruction: Var,
    pub attn_ur: Var,
    pub attn_ru: Var,
}

#[derive(Clone, Debug)]
pub struct Disentangler {
    parts: [ModalityDisentangler; 3],
    tokens: usize,
    d_model: usize,
}

impl Disentangler {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, cfg: &DisentanglerConfig, d_model: usize, rng: &mut R) -> Result<Self> {
        if cfg.tokens == 0 || d_model % cfg.tokens != 0 {
            bail!(Config, "d_model {d_model} is not divisible by {} tokens", cfg.tokens);
        }
        let d_k = d_model / cfg.tokens;
        let hidden = cfg.decoder_hidden.unwrap_or(2 * d_model);
        let parts = Modality::ALL.map(|m| {
            let name = format!("disentangler.{m}");
            ModalityDisentangler {
                branch_r: Linear::new(store, &format!("{name}.branch_r"), d_model, d_model, rng),
                branch_u: Linear::new(store, &format!("{name}.branch_u"), d_model, d_model, rng),
                attention: DualAttention::new(store, &format!("{name}.dual"), d_k, rng),
                decoder_hidden: Linear::new(store, &format!("{name}.decoder.hidden"), 3 * d_model, hidden, rng),
                decoder_out: Linear::new(store, &format!("{name}.decoder.out"), hidden, d_model, rng),
            }
        });
        Ok(Self { parts, tokens: cfg.tokens, d_model })
    }

    pub fn part(&self, m: Modality) -> &ModalityDisentangler {
        &self.parts[m.index()]
    }

    pub fn tokens(&self) -> usize {
        self.tokens
    }

    /// `r = tanh(x̂ W_r + b_r)`, `u = tanh(x̂ W_u + b_u)`.
    pub fn branch_project(&self, g: &mut Graph, m: Modality, x_hat: Var) -> Result<(Var, Var)> {
        if g.shape(x_hat).1 != self.d_model {
            bail!(Shape, "{m} input width {} does not match d_model {}", g.shape(x_hat).1, self.d_model);
        }
        let p = &self.parts[m.index()];
        let r = p.branch_r.forward(g, x_hat);
        let u = p.branch_u.forward(g, x_hat);
        Ok((g.tanh(r), g.tanh(u)))
    }

    /// Decoder over `[r*, r∩u, u*]`.
    pub fn reconstruct(&self, g: &mut Graph, m: Modality, r_star: Var, r_cap_u: Var, u_star: Var) -> Result<Var> {
        for v in [r_star, r_cap_u, u_star] {
            if g.shape(v).1 != self.d_model {
                bail!(Shape, "decoder input width {} does not match d_model {}", g.shape(v).1, self.d_model);
            }
        }
        let p = &self.parts[m.index()];
        let z = g.concat_cols(&[r_star, r_cap_u, u_star]);
        let h = p.decoder_hidden.forward(g, z);
        let h = g.gelu(h);
        Ok(p.decoder_out.forward(g, h))
    }

    pub fn forward(&self, g: &mut Graph, m: Modality, x_hat: Var) -> Result<Disentangled> {
        let (r, u) = self.branch_project(g, m, x_hat)?;
        let out = dual_output_attention(g, &self.parts[m.index()].attention, r, u, self.tokens)?;
        let r_cap_u = combine_intersection(g, out.r_cap_u_ur, out.r_cap_u_ru)?;
        let reconstruction = self.reconstruct(g, m, out.r_star, r_cap_u, out.u_star)?;
        Ok(Disentangled {
            modality: m,
            r,
            u,
            r_star: out.r_star,
            r_cap_u,
            u_star: out.u_star,
            reconstruction,
            attn_ur: out.attn_ur,
            attn_ru: out.attn_ru,
        })
    }

    pub fn param_ids(&self, store: &ParamStore) -> Vec<ParamId> {
        store.iter().filter(|(_, n, _)| n.starts_with("disentangler.")).map(|(id, _, _)| id).collect()
    }
}
