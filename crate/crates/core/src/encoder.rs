//! Feature extraction: per-modality input convolution, modality-specific
//! Transformer encoders and one parameter-shared Transformer encoder,
//! followed by pooling to one vector per modality.
//!
//! Padded frames are zeroed before the convolution, never attended to as
//! keys, and zeroed again in the final token states, so their contents
//! cannot influence any output.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::config::{EncoderConfig, Pooling};
use crate::data::BatchModality;
use crate::error::{bail, Result};
use crate::graph::{AttentionShape, Graph, Var};
use crate::nn::{LayerNorm, Linear};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Matrix;
use crate::Modality;

/// Randomness for a forward pass. `None` disables dropout (evaluation).
pub struct Ctx<'r> {
    pub rng: Option<&'r mut ChaCha8Rng>,
}

impl<'r> Ctx<'r> {
    pub fn eval() -> Self {
        Self { rng: None }
    }

    pub fn train(rng: &'r mut ChaCha8Rng) -> Self {
        Self { rng: Some(rng) }
    }

    pub fn is_training(&self) -> bool {
        self.rng.is_some()
    }

    pub fn dropout(&mut self, g: &mut Graph, x: Var, rate: f64) -> Var {
        let Some(rng) = self.rng.as_deref_mut() else { return x };
        if rate <= 0.0 {
            return x;
        }
        let keep = 1.0 / (1.0 - rate);
        let (r, c) = g.shape(x);
        let mask = (0..r * c).map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep }).collect();
        let m = g.constant(Matrix::from_vec(r, c, mask));
        g.mul(x, m)
    }
}

/// Sinusoidal position table, `len x width`.
pub fn positional_encoding(len: usize, width: usize) -> Matrix {
    let mut pe = Matrix::zeros(len, width);
    for pos in 0..len {
        for i in 0..width {
            let pair = (i / 2) as f64;
            let angle = pos as f64 / libm::pow(10000.0, 2.0 * pair / width as f64);
            pe.set(pos, i, if i % 2 == 0 { libm::sin(angle) } else { libm::cos(angle) });
        }
    }
    pe
}

fn mask_column(mask: &[bool]) -> Matrix {
    Matrix::from_vec(mask.len(), 1, mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect())
}

/// One pre-norm Transformer encoder layer.
#[derive(Clone, Debug)]
pub struct TransformerLayer {
    ln_attn: LayerNorm,
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    ln_ffn: LayerNorm,
    ff_in: Linear,
    ff_out: Linear,
    heads: usize,
    dropout: f64,
}

impl TransformerLayer {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        width: usize,
        heads: usize,
        ffn_mult: usize,
        dropout: f64,
        rng: &mut R,
    ) -> Self {
        Self {
            ln_attn: LayerNorm::new(store, &format!("{name}.ln_attn"), width),
            q: Linear::new(store, &format!("{name}.attn.q"), width, width, rng),
            k: Linear::new(store, &format!("{name}.attn.k"), width, width, rng),
            v: Linear::new(store, &format!("{name}.attn.v"), width, width, rng),
            o: Linear::new(store, &format!("{name}.attn.o"), width, width, rng),
            ln_ffn: LayerNorm::new(store, &format!("{name}.ln_ffn"), width),
            ff_in: Linear::new(store, &format!("{name}.ffn.in"), width, width * ffn_mult, rng),
            ff_out: Linear::new(store, &format!("{name}.ffn.out"), width * ffn_mult, width, rng),
            heads,
            dropout,
        }
    }

    /// `x` is `(batch * len) x width`; `mask` marks valid keys.
    pub fn forward(&self, g: &mut Graph, x: Var, batch: usize, len: usize, mask: &[bool], ctx: &mut Ctx) -> Var {
        let h = self.ln_attn.forward(g, x);
        let q = self.q.forward(g, h);
        let k = self.k.forward(g, h);
        let v = self.v.forward(g, h);
        let shape = AttentionShape { batch, q_len: len, k_len: len, heads: self.heads };
        let a = g.attention(q, k, v, shape, Some(mask));
        let a = self.o.forward(g, a);
        let a = ctx.dropout(g, a, self.dropout);
        let x = g.add(x, a);
        let h = self.ln_ffn.forward(g, x);
        let f = self.ff_in.forward(g, h);
        let f = g.gelu(f);
        let f = self.ff_out.forward(g, f);
        let f = ctx.dropout(g, f, self.dropout);
        g.add(x, f)
    }

    /// Attention node of the most recent forward is not retained; this
    /// recomputes the probabilities for inspection.
    pub fn attention_probs(&self, g: &mut Graph, x: Var, batch: usize, len: usize, mask: &[bool]) -> Vec<f64> {
        let h = self.ln_attn.forward(g, x);
        let q = self.q.forward(g, h);
        let k = self.k.forward(g, h);
        let v = self.v.forward(g, h);
        let shape = AttentionShape { batch, q_len: len, k_len: len, heads: self.heads };
        let a = g.attention(q, k, v, shape, Some(mask));
        g.attention_probs(a).map(<[f64]>::to_vec).unwrap_or_default()
    }

    pub fn heads(&self) -> usize {
        self.heads
    }
}

/// Framewise temporal convolution `d_in -> d_model`.
#[derive(Clone, Debug)]
pub struct ConvNorm {
    pub linear: Linear,
    pub kernel: usize,
    pub in_dim: usize,
}

/// Output of the feature extractor for one modality of a batch.
#[derive(Clone, Copy, Debug)]
pub struct EncodedModality {
    pub modality: Modality,
    /// `(batch * len) x d_model`, zero at padded frames.
    pub token_states: Var,
    /// `batch x d_model`.
    pub pooled: Var,
}

#[derive(Clone, Debug)]
pub struct Encoder {
    cfg: EncoderConfig,
    convs: [ConvNorm; 3],
    modality_layers: [Vec<TransformerLayer>; 3],
    shared_layers: Vec<TransformerLayer>,
}

impl Encoder {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, cfg: &EncoderConfig, input_dims: [usize; 3], rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d_model;
        let convs = Modality::ALL.map(|m| {
            let in_dim = input_dims[m.index()];
            ConvNorm {
                linear: Linear::new(store, &format!("encoder.conv.{m}"), in_dim * cfg.conv_kernel, d, rng),
                kernel: cfg.conv_kernel,
                in_dim,
            }
        });
        let modality_layers = Modality::ALL.map(|m| {
            (0..cfg.layers.modality(m))
                .map(|i| {
                    let name = format!("encoder.{m}.{i}");
                    TransformerLayer::new(store, &name, d, cfg.heads.modality(m), cfg.ffn_mult, cfg.dropout, rng)
                })
                .collect()
        });
        let shared_layers = (0..cfg.layers.shared)
            .map(|i| {
                let name = format!("encoder.shared.{i}");
                TransformerLayer::new(store, &name, d, cfg.heads.shared, cfg.ffn_mult, cfg.dropout, rng)
            })
            .collect();
        Ok(Self { cfg: cfg.clone(), convs, modality_layers, shared_layers })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    pub fn conv(&self, m: Modality) -> &ConvNorm {
        &self.convs[m.index()]
    }

    pub fn shared_layers(&self) -> &[TransformerLayer] {
        &self.shared_layers
    }

    pub fn modality_layers(&self, m: Modality) -> &[TransformerLayer] {
        &self.modality_layers[m.index()]
    }

    /// Per-frame projection of raw features to `d_model`. Padded frames are
    /// zeroed first; the output is `(batch * len) x d_model`.
    pub fn conv_normalize(&self, g: &mut Graph, m: Modality, input: &BatchModality) -> Result<Var> {
        let conv = &self.convs[m.index()];
        if input.values.cols() != conv.in_dim {
            bail!(Shape, "{m} features have dimension {} but the encoder expects {}", input.values.cols(), conv.in_dim);
        }
        if input.len == 0 || input.mask.len() % input.len != 0 || input.mask.len() != input.values.rows() {
            bail!(Shape, "{m} batch mask/length mismatch");
        }
        let mut values = input.values.clone();
        for (r, &valid) in input.mask.iter().enumerate() {
            if !valid {
                values.row_mut(r).iter_mut().for_each(|v| *v = 0.0);
            }
        }
        let batch = input.mask.len() / input.len;
        let x = g.constant(values);
        let x = if conv.kernel > 1 { g.temporal_unfold(x, batch, input.len, conv.kernel) } else { x };
        Ok(conv.linear.forward(g, x))
    }

    fn add_positions(&self, g: &mut Graph, tokens: Var, batch: usize, len: usize) -> Var {
        let pe = positional_encoding(len, self.cfg.d_model);
        let refs: Vec<&Matrix> = (0..batch).map(|_| &pe).collect();
        let pe = g.constant(Matrix::vstack(&refs));
        g.add(tokens, pe)
    }

    /// Modality-specific stack (positions are added first).
    pub fn encode_modality(&self, g: &mut Graph, m: Modality, tokens: Var, input: &BatchModality, ctx: &mut Ctx) -> Var {
        let batch = input.mask.len() / input.len;
        let mut x = self.add_positions(g, tokens, batch, input.len);
        for layer in &self.modality_layers[m.index()] {
            x = layer.forward(g, x, batch, input.len, &input.mask, ctx);
        }
        x
    }

    /// Runs the shared stack on each modality independently and pools.
    pub fn encode_shared(&self, g: &mut Graph, tokens: [Var; 3], inputs: [&BatchModality; 3], ctx: &mut Ctx) -> [EncodedModality; 3] {
        Modality::ALL.map(|m| {
            let input = inputs[m.index()];
            let batch = input.mask.len() / input.len;
            let mut x = tokens[m.index()];
            for layer in &self.shared_layers {
                x = layer.forward(g, x, batch, input.len, &input.mask, ctx);
            }
            let keep = g.constant(mask_column(&input.mask));
            let token_states = g.mul(x, keep);
            let pooled = pool(g, token_states, input, self.cfg.pooling);
            EncodedModality { modality: m, token_states, pooled }
        })
    }

    /// Full feature extraction for the three modalities of a batch.
    pub fn forward(&self, g: &mut Graph, inputs: [&BatchModality; 3], ctx: &mut Ctx) -> Result<[EncodedModality; 3]> {
        let mut tokens = Vec::with_capacity(3);
        for m in Modality::ALL {
            let t = self.conv_normalize(g, m, inputs[m.index()])?;
            tokens.push(self.encode_modality(g, m, t, inputs[m.index()], ctx));
        }
        Ok(self.encode_shared(g, [tokens[0], tokens[1], tokens[2]], inputs, ctx))
    }

    /// Parameter ids owned by the encoder, in creation order.
    pub fn param_ids(&self, store: &ParamStore) -> Vec<ParamId> {
        store.iter().filter(|(_, n, _)| n.starts_with("encoder.")).map(|(id, _, _)| id).collect()
    }
}

/// Pools `(batch * len) x d` token states to `batch x d`.
pub fn pool(g: &mut Graph, token_states: Var, input: &BatchModality, pooling: Pooling) -> Var {
    match pooling {
        Pooling::MeanMasked => {
            let w = input.mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect();
            g.group_mean(token_states, input.len, Some(w))
        }
        Pooling::FirstToken => {
            let batch = input.mask.len() / input.len;
            let idx = (0..batch)
                .map(|b| {
                    let first = (0..input.len).find(|&t| input.mask[b * input.len + t]).unwrap_or(0);
                    b * input.len + first
                })
                .collect();
            g.gather_rows(token_states, idx)
        }
    }
}
