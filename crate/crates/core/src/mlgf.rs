//! Local-and-global fusion: one query transformer reads the global image
//! stream and, with the same parameters, the local face stream; a
//! cross-attention step then merges the two query outputs.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::nn::{multi_head, normal_like_init, LayerNorm, Linear, Mlp, MultiHeadAttention};
use crate::tensor::{Graph, ParamId, ParamStore, Result, Tensor, TensorError, Var};

/// Self-attention mask over the concatenated `[queries; text]` rows.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskMode {
    /// Queries and text attend to each other.
    #[default]
    Bidirectional,
    /// Queries attend only to queries, text only to text.
    Unimodal,
}

impl FromStr for MaskMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "bidirectional" => Ok(MaskMode::Bidirectional),
            "unimodal" => Ok(MaskMode::Unimodal),
            other => Err(format!(
                "unknown mask mode {other:?} (expected bidirectional or unimodal)"
            )),
        }
    }
}

impl fmt::Display for MaskMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MaskMode::Bidirectional => "bidirectional",
            MaskMode::Unimodal => "unimodal",
        })
    }
}

/// `[B, nq + T, nq + T]` self-attention block mask. Padded text columns are
/// always blocked.
pub fn self_attention_mask(nq: usize, valid: &Tensor, mode: MaskMode) -> Tensor {
    let (b, t) = (valid.shape()[0], valid.shape()[1]);
    let n = nq + t;
    Tensor::from_fn(&[b, n, n], |i| {
        let (bi, r, c) = (i / (n * n), (i / n) % n, i % n);
        let pad = c >= nq && valid.data()[bi * t + c - nq] == 0.0;
        let cross = (r < nq) != (c < nq);
        f64::from(pad || (mode == MaskMode::Unimodal && cross))
    })
}

/// Starting value of each block's query-text alignment bias. Additive
/// position embeddings alone leave query `r` with no reason to prefer text
/// position `r - 1`, and grounding never gets off the ground.
pub const ALIGN_BIAS_INIT: f64 = 5.0;

/// `[nq + t, nq + t]` indicator of aligned (query, text) pairs.
pub fn alignment_pairs(nq: usize, t: usize) -> Tensor {
    let n = nq + t;
    Tensor::from_fn(&[n, n], |i| {
        let (r, c) = (i / n, i % n);
        let pair = |q: usize, x: usize| q >= 1 && q < nq && x == nq + q - 1;
        f64::from(pair(r, c) || pair(c, r))
    })
}

#[derive(Clone, Debug)]
pub struct QBlock {
    /// Shared by the query rows and the text rows.
    pub ln_self: LayerNorm,
    pub self_attn: MultiHeadAttention,
    /// Learned logit bonus, shape `[1]`, between query row `r >= 1` and the
    /// text row at position `r - 1`, in both directions.
    pub align_bias: ParamId,
    pub ln_cross: LayerNorm,
    pub cross_attn: MultiHeadAttention,
    pub ln_ffn_q: LayerNorm,
    pub ffn_q: Mlp,
    /// Absent in the last block, whose text rows feed nothing.
    pub text_ffn: Option<(LayerNorm, Mlp)>,
}

#[derive(Clone, Debug)]
pub struct QFormer {
    pub queries: ParamId,
    /// Added to query rows `1..` and to text rows so both align with text positions.
    pub pos: ParamId,
    pub blocks: Vec<QBlock>,
    pub ln_out: LayerNorm,
    pub num_queries: usize,
}

/// Attention weights of one query-transformer pass, per block and head.
pub struct QFormerOutput {
    /// `[B, nq, d]`
    pub queries: Var,
    pub self_attn: Vec<Vec<Var>>,
    pub cross_attn: Vec<Vec<Var>>,
}

impl QFormer {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        ps: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        hidden: usize,
        num_blocks: usize,
        max_len: usize,
        rng: &mut R,
    ) -> Self {
        let blocks = (0..num_blocks)
            .map(|i| {
                let n = format!("{name}.block{i}");
                QBlock {
                    ln_self: LayerNorm::new(ps, &format!("{n}.ln_self"), dim),
                    self_attn: MultiHeadAttention::new(ps, &format!("{n}.self"), dim, heads, rng),
                    align_bias: ps.add(format!("{n}.align_bias"), Tensor::full(&[1], ALIGN_BIAS_INIT)),
                    ln_cross: LayerNorm::new(ps, &format!("{n}.ln_cross"), dim),
                    cross_attn: MultiHeadAttention::new(ps, &format!("{n}.cross"), dim, heads, rng),
                    ln_ffn_q: LayerNorm::new(ps, &format!("{n}.ln_ffn_q"), dim),
                    ffn_q: Mlp::new(ps, &format!("{n}.ffn_q"), (dim, hidden, dim), rng),
                    text_ffn: (i + 1 < num_blocks).then(|| {
                        (
                            LayerNorm::new(ps, &format!("{n}.ln_ffn_t"), dim),
                            Mlp::new(ps, &format!("{n}.ffn_t"), (dim, hidden, dim), rng),
                        )
                    }),
                }
            })
            .collect();
        Self {
            queries: ps.add(
                format!("{name}.queries"),
                normal_like_init(rng, &[1 + max_len, dim], 0.3),
            ),
            pos: ps.add(format!("{name}.pos"), normal_like_init(rng, &[max_len, dim], 0.02)),
            blocks,
            ln_out: LayerNorm::new(ps, &format!("{name}.ln_out"), dim),
            num_queries: 1 + max_len,
        }
    }

    /// Runs the queries against `image` (`[B, N, d]`) and `text` (`[B, T, d]`,
    /// `T == nq - 1`) with validity mask `valid` (`[B, T]`).
    pub fn forward(
        &self,
        g: &mut Graph,
        ps: &ParamStore,
        image: Var,
        text: Var,
        valid: &Tensor,
        mode: MaskMode,
    ) -> Result<QFormerOutput> {
        let (b, t, d) = (g.shape(text)[0], g.shape(text)[1], g.shape(text)[2]);
        let nq = self.num_queries;
        if t + 1 != nq || g.shape(image)[0] != b || valid.shape() != [b, t] {
            return Err(TensorError::Invalid {
                op: "qformer_fuse",
                msg: format!(
                    "{nq} queries need {} text rows; got text {:?}, image {:?}, mask {:?}",
                    nq - 1,
                    g.shape(text),
                    g.shape(image),
                    valid.shape()
                ),
            });
        }
        let pos = g.param(ps, self.pos)?;
        let zero_row = g.constant(Tensor::zeros(&[1, d]))?;
        let qpos = g.concat(&[zero_row, pos], 0)?;
        let queries = g.param(ps, self.queries)?;
        let q0 = g.add(queries, qpos)?;
        let mut q = crate::nn::repeat_batch(g, q0, b)?;
        let mut x_t = g.add(text, pos)?;
        let mask = self_attention_mask(nq, valid, mode);
        let n = nq + t;
        let pairs = g.constant(alignment_pairs(nq, t).reshaped(&[n * n, 1])?)?;

        let mut self_attn = Vec::with_capacity(self.blocks.len());
        let mut cross_attn = Vec::with_capacity(self.blocks.len());
        for blk in &self.blocks {
            let x = g.concat(&[q, x_t], 1)?;
            let h = blk.ln_self.forward(g, ps, x)?;
            let beta = g.param(ps, blk.align_bias)?;
            let bias = g.mul(pairs, beta)?;
            let bias = g.reshape(bias, &[n, n])?;
            let a = blk.self_attn.forward_biased(g, ps, h, h, Some(&mask), Some(bias))?;
            let x = g.add(x, a.out)?;
            self_attn.push(a.weights);
            q = g.slice(x, 1, 0, nq)?;
            x_t = g.slice(x, 1, nq, t)?;

            let h = blk.ln_cross.forward(g, ps, q)?;
            let c = blk.cross_attn.forward(g, ps, h, image, None)?;
            q = g.add(q, c.out)?;
            cross_attn.push(c.weights);

            let h = blk.ln_ffn_q.forward(g, ps, q)?;
            let f = blk.ffn_q.forward(g, ps, h)?;
            q = g.add(q, f)?;
            if let Some((ln, ffn)) = &blk.text_ffn {
                let h = ln.forward(g, ps, x_t)?;
                let f = ffn.forward(g, ps, h)?;
                x_t = g.add(x_t, f)?;
            }
        }
        let queries = self.ln_out.forward(g, ps, q)?;
        Ok(QFormerOutput {
            queries,
            self_attn,
            cross_attn,
        })
    }
}

/// Merges the local-stream queries into the global stream:
/// `f = f_d + softmax((f_d Wq)(f_v Wk)^T / sqrt(d)) f_v`.
#[derive(Clone, Debug)]
pub struct CrossFuse {
    pub wq: Linear,
    pub wk: Linear,
    pub residual: bool,
}

impl CrossFuse {
    pub fn new<R: Rng>(ps: &mut ParamStore, name: &str, dim: usize, residual: bool, rng: &mut R) -> Self {
        Self {
            wq: Linear::new(ps, &format!("{name}.wq"), dim, dim, rng),
            wk: Linear::new(ps, &format!("{name}.wk"), dim, dim, rng),
            residual,
        }
    }

    /// Returns `(f, weights)` with weights `[B, nq, nq]`.
    pub fn forward(&self, g: &mut Graph, ps: &ParamStore, f_d: Var, f_v: Var) -> Result<(Var, Var)> {
        if g.shape(f_d) != g.shape(f_v) {
            return Err(TensorError::ShapeMismatch {
                op: "cross_fuse",
                lhs: g.shape(f_d).to_vec(),
                rhs: g.shape(f_v).to_vec(),
            });
        }
        let q = self.wq.forward(g, ps, f_d)?;
        let k = self.wk.forward(g, ps, f_v)?;
        let (att, w) = multi_head(g, q, k, f_v, 1, None, None)?;
        let out = if self.residual { g.add(f_d, att)? } else { att };
        Ok((out, w[0]))
    }
}
