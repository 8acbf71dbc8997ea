//! Past/future recurrent encoders and the temporal self-attention encoder.

use candle_core::{Tensor, D};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{softmax_last, tensor_from_f64, to_f64_vec, Ctx, GruCell, LayerNorm, Linear, ParamStore};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AttentionConfig {
    pub embed_dim: usize,
    pub num_heads: usize,
    pub num_layers: usize,
    /// Width of the feed-forward sublayer.
    pub ff_dim: usize,
    /// Dimension of `h_A`.
    pub output_dim: usize,
    /// Add sinusoidal positional encodings after the input embedding.
    pub positional: bool,
}

impl Default for AttentionConfig {
    fn default() -> Self {
        Self {
            embed_dim: 32,
            num_heads: 8,
            num_layers: 1,
            ff_dim: 128,
            output_dim: 256,
            positional: true,
        }
    }
}

impl AttentionConfig {
    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_heads == 0 || self.embed_dim % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "embedding dimension {} is not divisible by {} heads",
                self.embed_dim, self.num_heads
            )));
        }
        if self.num_layers == 0 {
            return Err(Error::Config("attention needs at least one layer".into()));
        }
        Ok(())
    }
}

/// Hidden representations handed to the latent model.
#[derive(Debug, Clone)]
pub struct EncodedFeatures {
    pub h_x: Tensor,
    /// Future encoding; only available when the ground truth is known.
    pub h_y: Option<Tensor>,
    /// Attention encoding; absent when the attention module is disabled.
    pub h_a: Option<Tensor>,
}

fn ensure_finite(x: &Tensor, what: &str) -> Result<()> {
    if to_f64_vec(x)?.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Shape(format!("{what} contains non-finite values")))
    }
}

/// `softmax(Q Kᵀ / sqrt(d_k)) V` over the last two dimensions; returns the
/// output and the attention weights.
pub fn scaled_dot_attention(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<(Tensor, Tensor)> {
    let d_k = *k.dims().last().unwrap();
    if q.dim(D::Minus1)? != d_k || k.dim(D::Minus2)? != v.dim(D::Minus2)? {
        return Err(Error::Shape(format!(
            "attention shapes q{:?} k{:?} v{:?}",
            q.dims(),
            k.dims(),
            v.dims()
        )));
    }
    let kt = k.transpose(D::Minus2, D::Minus1)?.contiguous()?;
    let scores = q.contiguous()?.matmul(&kt)?.affine(1.0 / (d_k as f64).sqrt(), 0.0)?;
    let weights = softmax_last(&scores)?;
    let out = weights.matmul(&v.contiguous()?)?;
    Ok((out, weights))
}

pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    heads: usize,
}

impl MultiHeadAttention {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, heads: usize) -> Result<Self> {
        Ok(Self {
            query: Linear::new(store, &format!("{name}.query"), dim, dim)?,
            key: Linear::new(store, &format!("{name}.key"), dim, dim)?,
            value: Linear::new(store, &format!("{name}.value"), dim, dim)?,
            output: Linear::new(store, &format!("{name}.output"), dim, dim)?,
            heads,
        })
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    /// `(B, T, E) -> (B, heads, T, E / heads)`
    fn split_heads(&self, x: &Tensor) -> Result<Tensor> {
        let (b, t, e) = x.dims3()?;
        Ok(x.reshape((b, t, self.heads, e / self.heads))?
            .transpose(1, 2)?
            .contiguous()?)
    }

    /// Self-attention over `x: (B, T, E)`; returns the output and the
    /// per-head weights `(B, heads, T, T)`.
    pub fn forward_with_weights(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let (b, t, e) = x.dims3()?;
        let q = self.split_heads(&self.query.forward(x)?)?;
        let k = self.split_heads(&self.key.forward(x)?)?;
        let v = self.split_heads(&self.value.forward(x)?)?;
        let (heads, weights) = scaled_dot_attention(&q, &k, &v)?;
        let merged = heads.transpose(1, 2)?.contiguous()?.reshape((b, t, e))?;
        Ok((self.output.forward(&merged)?, weights))
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.forward_with_weights(x)?.0)
    }
}

/// Post-norm transformer encoder layer.
pub struct EncoderLayer {
    pub attention: MultiHeadAttention,
    norm1: LayerNorm,
    ff1: Linear,
    ff2: Linear,
    norm2: LayerNorm,
}

impl EncoderLayer {
    fn new(store: &mut ParamStore, name: &str, cfg: &AttentionConfig) -> Result<Self> {
        Ok(Self {
            attention: MultiHeadAttention::new(store, &format!("{name}.mha"), cfg.embed_dim, cfg.num_heads)?,
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), cfg.embed_dim)?,
            ff1: Linear::new(store, &format!("{name}.ff1"), cfg.embed_dim, cfg.ff_dim)?,
            ff2: Linear::new(store, &format!("{name}.ff2"), cfg.ff_dim, cfg.embed_dim)?,
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), cfg.embed_dim)?,
        })
    }

    fn forward(&self, x: &Tensor, ctx: &mut Ctx) -> Result<Tensor> {
        let a = ctx.dropout(&self.attention.forward(x)?)?;
        let x = self.norm1.forward(&(x + a)?)?;
        let f = self.ff2.forward(&self.ff1.forward(&x)?.relu()?)?;
        let f = ctx.dropout(&f)?;
        self.norm2.forward(&(x + f)?)
    }
}

/// Sinusoidal table `(len, dim)`.
pub fn positional_encoding(len: usize, dim: usize) -> Vec<f64> {
    let mut out = vec![0.0; len * dim];
    for pos in 0..len {
        for i in 0..dim {
            let pair = (i / 2) as f64;
            let angle = pos as f64 / 10000f64.powf(2.0 * pair / dim as f64);
            out[pos * dim + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    out
}

/// Embeds the observed sequence, runs the encoder stack, pools the last time
/// step and maps it through a fully connected head to `h_A`.
pub struct AttentionEncoder {
    pub embed: Linear,
    pub layers: Vec<EncoderLayer>,
    pub head: Linear,
    config: AttentionConfig,
}

impl AttentionEncoder {
    pub fn new(store: &mut ParamStore, name: &str, input_dim: usize, cfg: &AttentionConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            embed: Linear::new(store, &format!("{name}.embed"), input_dim, cfg.embed_dim)?,
            layers: (0..cfg.num_layers)
                .map(|i| EncoderLayer::new(store, &format!("{name}.layer{i}"), cfg))
                .collect::<Result<_>>()?,
            head: Linear::new(store, &format!("{name}.head"), cfg.embed_dim, cfg.output_dim)?,
            config: cfg.clone(),
        })
    }

    pub fn config(&self) -> &AttentionConfig {
        &self.config
    }

    pub fn set_positional(&mut self, on: bool) {
        self.config.positional = on;
    }

    /// `(B, T, 4) -> (B, T, embed_dim)`
    pub fn embed_trajectory(&self, x: &Tensor) -> Result<Tensor> {
        ensure_finite(x, "trajectory")?;
        let e = self.embed.forward(x)?;
        if !self.config.positional {
            return Ok(e);
        }
        let (_, t, d) = e.dims3()?;
        let pe = tensor_from_f64(positional_encoding(t, d), &[t, d], e.dtype())?;
        Ok(e.broadcast_add(&pe)?)
    }

    /// Encoder stack output before pooling, `(B, T, embed_dim)`.
    pub fn sequence(&self, x: &Tensor, ctx: &mut Ctx) -> Result<Tensor> {
        let mut h = self.embed_trajectory(x)?;
        for layer in &self.layers {
            h = layer.forward(&h, ctx)?;
        }
        Ok(h)
    }

    pub fn encode(&self, x: &Tensor, ctx: &mut Ctx) -> Result<Tensor> {
        let seq = self.sequence(x, ctx)?;
        let t = seq.dim(1)?;
        let last = seq.narrow(1, t - 1, 1)?.squeeze(1)?;
        let h_a = self.head.forward(&last)?.relu()?;
        ctx.dropout(&h_a)
    }
}

/// Final hidden state of a GRU run over a `(B, T, 4)` sequence from a zero
/// initial state.
pub struct GruEncoder {
    pub cell: GruCell,
}

impl GruEncoder {
    pub fn new(store: &mut ParamStore, name: &str, input_dim: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            cell: GruCell::new(store, name, input_dim, hidden)?,
        })
    }

    pub fn encode(&self, x: &Tensor) -> Result<Tensor> {
        let (b, t, _) = x.dims3()?;
        if t == 0 {
            return Err(Error::Shape("cannot encode an empty sequence".into()));
        }
        let gates = self.cell.input_gates(x)?;
        let mut h = Tensor::zeros((b, self.cell.hidden_dim()), x.dtype(), x.device())?;
        for s in 0..t {
            h = self.cell.step_gated(&gates.narrow(1, s, 1)?.squeeze(1)?, &h)?;
        }
        Ok(h)
    }
}
