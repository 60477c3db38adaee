//! Layers shared by the encoders, the query transformer and the heads.

use rand::Rng;

use crate::tensor::{Graph, ParamId, ParamStore, Result, Tensor, Var, NEG_INF_SURROGATE};

/// Uniform init in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
pub fn uniform_init<R: Rng>(rng: &mut R, shape: &[usize], fan_in: usize) -> Tensor {
    let a = 1.0 / (fan_in as f64).sqrt();
    Tensor::from_fn(shape, |_| rng.gen_range(-a..a))
}

pub fn normal_like_init<R: Rng>(rng: &mut R, shape: &[usize], scale: f64) -> Tensor {
    // Sum of three uniforms: cheap, bounded, roughly bell-shaped.
    Tensor::from_fn(shape, |_| {
        let s: f64 = (0..3).map(|_| rng.gen_range(-1.0..1.0)).sum();
        s * scale
    })
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        let weight = store.add(format!("{name}.weight"), uniform_init(rng, &[in_dim, out_dim], in_dim));
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[out_dim]));
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    /// `x @ W + b` over the last dimension of `x`.
    pub fn forward(&self, g: &mut Graph, ps: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(ps, self.weight)?;
        let b = g.param(ps, self.bias)?;
        let y = g.matmul(x, w)?;
        g.add(y, b)
    }

    pub fn params(&self) -> Vec<ParamId> {
        vec![self.weight, self.bias]
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::full(&[dim], 1.0)),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[dim])),
        }
    }

    pub fn forward(&self, g: &mut Graph, ps: &ParamStore, x: Var) -> Result<Var> {
        let gamma = g.param(ps, self.gamma)?;
        let beta = g.param(ps, self.beta)?;
        g.layernorm(x, gamma, beta)
    }

    pub fn params(&self) -> Vec<ParamId> {
        vec![self.gamma, self.beta]
    }
}

/// Two linear layers with a gelu in between.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, dims: (usize, usize, usize), rng: &mut R) -> Self {
        Self {
            fc1: Linear::new(store, &format!("{name}.fc1"), dims.0, dims.1, rng),
            fc2: Linear::new(store, &format!("{name}.fc2"), dims.1, dims.2, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, ps: &ParamStore, x: Var) -> Result<Var> {
        let h = self.fc1.forward(g, ps, x)?;
        let h = g.gelu(h)?;
        self.fc2.forward(g, ps, h)
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p = self.fc1.params();
        p.extend(self.fc2.params());
        p
    }
}

/// Result of an attention call: the projected output and the per-head weight
/// matrices (`[B, n, m]` each), kept for inspection and export.
pub struct AttentionOutput {
    pub out: Var,
    pub weights: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
    pub dim: usize,
}

impl MultiHeadAttention {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, dim: usize, heads: usize, rng: &mut R) -> Self {
        assert!(dim.is_multiple_of(heads), "dim {dim} not divisible by {heads} heads");
        Self {
            q: Linear::new(store, &format!("{name}.q"), dim, dim, rng),
            k: Linear::new(store, &format!("{name}.k"), dim, dim, rng),
            v: Linear::new(store, &format!("{name}.v"), dim, dim, rng),
            o: Linear::new(store, &format!("{name}.o"), dim, dim, rng),
            heads,
            dim,
        }
    }

    /// `query: [B, n, d]`, `context: [B, m, d]`. `blocked` marks (with 1) the
    /// key positions a query row may not attend to; its shape is `[n, m]` or
    /// `[B, n, m]`.
    pub fn forward(
        &self,
        g: &mut Graph,
        ps: &ParamStore,
        query: Var,
        context: Var,
        blocked: Option<&Tensor>,
    ) -> Result<AttentionOutput> {
        self.forward_biased(g, ps, query, context, blocked, None)
    }

    /// As [`forward`](Self::forward), with `bias` added to the attention
    /// logits of every head before masking.
    pub fn forward_biased(
        &self,
        g: &mut Graph,
        ps: &ParamStore,
        query: Var,
        context: Var,
        blocked: Option<&Tensor>,
        bias: Option<Var>,
    ) -> Result<AttentionOutput> {
        let q = self.q.forward(g, ps, query)?;
        let k = self.k.forward(g, ps, context)?;
        let v = self.v.forward(g, ps, context)?;
        let (out, weights) = multi_head(g, q, k, v, self.heads, blocked, bias)?;
        let out = self.o.forward(g, ps, out)?;
        Ok(AttentionOutput { out, weights })
    }

    pub fn params(&self) -> Vec<ParamId> {
        [&self.q, &self.k, &self.v, &self.o]
            .iter()
            .flat_map(|l| l.params())
            .collect()
    }
}

/// Scaled dot-product attention, `softmax(Q K^T / sqrt(dh)) V`, split into
/// `heads` column groups. Returns the concatenated head outputs and weights.
pub fn multi_head(
    g: &mut Graph,
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
    blocked: Option<&Tensor>,
    bias: Option<Var>,
) -> Result<(Var, Vec<Var>)> {
    let d = *g.shape(q).last().unwrap();
    let dh = d / heads;
    let axis = g.shape(q).len() - 1;
    let mut outs = Vec::with_capacity(heads);
    let mut weights = Vec::with_capacity(heads);
    for h in 0..heads {
        let (qh, kh, vh) = if heads == 1 {
            (q, k, v)
        } else {
            (
                g.slice(q, axis, h * dh, dh)?,
                g.slice(k, axis, h * dh, dh)?,
                g.slice(v, axis, h * dh, dh)?,
            )
        };
        let (o, w) = attend(g, qh, kh, vh, blocked, bias)?;
        outs.push(o);
        weights.push(w);
    }
    let out = if heads == 1 { outs[0] } else { g.concat(&outs, axis)? };
    Ok((out, weights))
}

/// Single-head attention. Returns `(output, weights)`. `bias` must broadcast
/// over the score suffix; blocked positions stay blocked whatever the bias.
pub fn attend(
    g: &mut Graph,
    q: Var,
    k: Var,
    v: Var,
    blocked: Option<&Tensor>,
    bias: Option<Var>,
) -> Result<(Var, Var)> {
    let dh = *g.shape(q).last().unwrap();
    let kt = g.transpose(k)?;
    let scores = g.matmul(q, kt)?;
    let mut scores = g.scale(scores, 1.0 / (dh as f64).sqrt())?;
    if let Some(b) = bias {
        scores = g.add(scores, b)?;
    }
    if let Some(mask) = blocked {
        scores = g.masked_fill(scores, mask, NEG_INF_SURROGATE)?;
    }
    let w = g.softmax_lastdim(scores)?;
    let out = g.matmul(w, v)?;
    Ok((out, w))
}

/// Pre-norm transformer block: self-attention then feed-forward, each with a
/// residual connection.
#[derive(Clone, Debug)]
pub struct TransformerBlock {
    pub ln1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ln2: LayerNorm,
    pub mlp: Mlp,
}

impl TransformerBlock {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), dim),
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), dim, heads, rng),
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), dim),
            mlp: Mlp::new(store, &format!("{name}.mlp"), (dim, hidden, dim), rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, ps: &ParamStore, x: Var, blocked: Option<&Tensor>) -> Result<AttentionOutput> {
        let h = self.ln1.forward(g, ps, x)?;
        let a = self.attn.forward(g, ps, h, h, blocked)?;
        let x = g.add(x, a.out)?;
        let h = self.ln2.forward(g, ps, x)?;
        let m = self.mlp.forward(g, ps, h)?;
        let out = g.add(x, m)?;
        Ok(AttentionOutput {
            out,
            weights: a.weights,
        })
    }
}

/// Broadcasts a `[n, d]` tensor to `[batch, n, d]`.
pub fn repeat_batch(g: &mut Graph, x: Var, batch: usize) -> Result<Var> {
    let mut shape = vec![batch];
    shape.extend_from_slice(g.shape(x));
    let zeros = g.constant(Tensor::zeros(&shape))?;
    g.add(zeros, x)
}

/// Binary cross-entropy with logits, elementwise: `softplus(z) - y*z`.
pub fn bce_with_logits(g: &mut Graph, logits: Var, targets: &Tensor) -> Result<Var> {
    let sp = g.softplus(logits)?;
    let y = g.constant(targets.clone())?;
    let yz = g.mul(logits, y)?;
    g.sub(sp, yz)
}
