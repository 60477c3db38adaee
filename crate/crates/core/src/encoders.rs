//! Global image encoder, text encoder and local face encoder.
//!
//! All three emit `d`-wide rows so the query transformer can consume any of
//! them without a per-source projection.

use rand::Rng;

use crate::data::Vocab;
use crate::model::ModelConfig;
use crate::nn::{normal_like_init, LayerNorm, Linear, TransformerBlock};
use crate::tensor::{Graph, ParamId, ParamStore, Result, Tensor, TensorError, Var};

/// Self-attention regime of the image encoder. `Identity` lets every row
/// attend only to itself; it exists to test locality.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ImageAttention {
    Full,
    Identity,
}

pub struct Encoded {
    pub emb: Var,
    /// Per block, per head attention weights.
    pub attn: Vec<Vec<Var>>,
}

#[derive(Clone, Debug)]
pub struct ImageEncoder {
    pub patch_proj: Linear,
    pub pos: ParamId,
    pub blocks: Vec<TransformerBlock>,
    pub ln_f: LayerNorm,
    image_size: usize,
    patch: usize,
}

impl ImageEncoder {
    pub fn new<R: Rng>(ps: &mut ParamStore, name: &str, cfg: &ModelConfig, rng: &mut R) -> Self {
        let p = cfg.patch * cfg.patch;
        let rows = cfg.num_patches() + 1;
        Self {
            patch_proj: Linear::new(ps, &format!("{name}.patch"), p, cfg.dim, rng),
            pos: ps.add(format!("{name}.pos"), normal_like_init(rng, &[rows, cfg.dim], 0.02)),
            blocks: (0..cfg.encoder_blocks)
                .map(|i| {
                    TransformerBlock::new(ps, &format!("{name}.block{i}"), cfg.dim, cfg.heads, cfg.ffn_hidden, rng)
                })
                .collect(),
            ln_f: LayerNorm::new(ps, &format!("{name}.ln_f"), cfg.dim),
            image_size: cfg.image_size,
            patch: cfg.patch,
        }
    }

    /// `[B, 1 + patches, patch*patch]` with an all-zero row 0 standing in for
    /// the cls token (its embedding is the projection bias plus `pos[0]`).
    pub fn patchify(&self, images: &[&[f64]]) -> Result<Tensor> {
        let (n, p) = (self.image_size, self.patch);
        let g = n / p;
        let rows = g * g + 1;
        let mut data = vec![0.0; images.len() * rows * p * p];
        for (b, img) in images.iter().enumerate() {
            if img.len() != n * n {
                return Err(TensorError::Invalid {
                    op: "encode_image",
                    msg: format!("expected {n}x{n} image, got {} pixels", img.len()),
                });
            }
            for py in 0..g {
                for px in 0..g {
                    let row = b * rows + 1 + py * g + px;
                    for y in 0..p {
                        for x in 0..p {
                            data[row * p * p + y * p + x] = img[(py * p + y) * n + px * p + x];
                        }
                    }
                }
            }
        }
        Tensor::new(vec![images.len(), rows, p * p], data)
    }

    pub fn forward(&self, g: &mut Graph, ps: &ParamStore, images: &[&[f64]], mode: ImageAttention) -> Result<Encoded> {
        let patches = g.constant(self.patchify(images)?)?;
        let x = self.patch_proj.forward(g, ps, patches)?;
        let pos = g.param(ps, self.pos)?;
        let mut x = g.add(x, pos)?;
        let rows = g.shape(x)[1];
        let blocked = match mode {
            ImageAttention::Full => None,
            ImageAttention::Identity => Some(Tensor::from_fn(&[rows, rows], |i| f64::from(i / rows != i % rows))),
        };
        let mut attn = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let out = block.forward(g, ps, x, blocked.as_ref())?;
            x = out.out;
            attn.push(out.weights);
        }
        let emb = self.ln_f.forward(g, ps, x)?;
        Ok(Encoded { emb, attn })
    }
}

#[derive(Clone, Debug)]
pub struct TextEncoder {
    pub embed: ParamId,
    pub pos: ParamId,
    pub blocks: Vec<TransformerBlock>,
    pub ln_f: LayerNorm,
    vocab_size: usize,
    max_len: usize,
}

/// `[B, T]` with 1.0 at non-padding positions.
pub fn validity(tokens: &[&[u32]], len: usize) -> Tensor {
    Tensor::from_fn(&[tokens.len().max(1), len], |i| {
        let (b, t) = (i / len, i % len);
        tokens
            .get(b)
            .and_then(|s| s.get(t))
            .map_or(0.0, |&x| f64::from(x != Vocab::PAD))
    })
}

/// Attention block mask `[B, T, T]` hiding padded key columns.
pub fn padding_block_mask(valid: &Tensor) -> Tensor {
    let (b, t) = (valid.shape()[0], valid.shape()[1]);
    Tensor::from_fn(&[b, t, t], |i| {
        let (bi, col) = (i / (t * t), i % t);
        1.0 - valid.data()[bi * t + col]
    })
}

impl TextEncoder {
    pub fn new<R: Rng>(ps: &mut ParamStore, name: &str, cfg: &ModelConfig, rng: &mut R) -> Self {
        Self {
            embed: ps.add(
                format!("{name}.embed"),
                normal_like_init(rng, &[cfg.vocab_size, cfg.dim], 0.3),
            ),
            pos: ps.add(
                format!("{name}.pos"),
                normal_like_init(rng, &[cfg.max_len, cfg.dim], 0.02),
            ),
            blocks: (0..cfg.encoder_blocks)
                .map(|i| {
                    TransformerBlock::new(ps, &format!("{name}.block{i}"), cfg.dim, cfg.heads, cfg.ffn_hidden, rng)
                })
                .collect(),
            ln_f: LayerNorm::new(ps, &format!("{name}.ln_f"), cfg.dim),
            vocab_size: cfg.vocab_size,
            max_len: cfg.max_len,
        }
    }

    /// Encodes a batch of token sequences, padding each to the longest one.
    /// Returns the embeddings `[B, T, d]` and the validity mask `[B, T]`.
    pub fn forward(&self, g: &mut Graph, ps: &ParamStore, tokens: &[&[u32]]) -> Result<(Encoded, Tensor)> {
        let len = tokens.iter().map(|s| s.len()).max().unwrap_or(0);
        if len == 0 || len > self.max_len {
            return Err(TensorError::Invalid {
                op: "encode_text",
                msg: format!("sequence length {len} outside 1..={}", self.max_len),
            });
        }
        let mut ids = Vec::with_capacity(tokens.len() * len);
        for s in tokens {
            if let Some(bad) = s.iter().find(|&&t| t as usize >= self.vocab_size) {
                return Err(TensorError::Invalid {
                    op: "encode_text",
                    msg: format!("token id {bad} outside vocabulary of {}", self.vocab_size),
                });
            }
            ids.extend(s.iter().map(|&t| t as usize));
            ids.extend(std::iter::repeat_n(Vocab::PAD as usize, len - s.len()));
        }
        let valid = validity(tokens, len);
        let blocked = padding_block_mask(&valid);
        let table = g.param(ps, self.embed)?;
        let x = g.embedding_lookup(table, &ids, &[tokens.len(), len])?;
        let pos = g.param(ps, self.pos)?;
        let pos = if len == self.max_len {
            pos
        } else {
            g.slice(pos, 0, 0, len)?
        };
        let mut x = g.add(x, pos)?;
        let mut attn = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let out = block.forward(g, ps, x, Some(&blocked))?;
            x = out.out;
            attn.push(out.weights);
        }
        let emb = self.ln_f.forward(g, ps, x)?;
        Ok((Encoded { emb, attn }, valid))
    }
}

/// Small convolutional face encoder with an auxiliary real/fake probe.
///
/// Two 3x3 stride-2 convolutions take a `r x r` crop to an `r/4 x r/4` grid,
/// which is average-pooled 2x2 into local tokens. The cls row is a projection
/// of the global average of the grid.
#[derive(Clone, Debug)]
pub struct LocalEncoder {
    pub conv1: Linear,
    pub conv2: Linear,
    pub token_proj: Linear,
    pub cls_proj: Linear,
    pub pos: ParamId,
    pub ln_f: LayerNorm,
    pub probe: Linear,
    res: usize,
    c1: usize,
}

/// For a stride-2, pad-1, 3x3 convolution over an `n x n` grid: per output
/// position and kernel tap, the flat input index or `None` for padding.
fn conv_taps(n: usize) -> Vec<Option<usize>> {
    let out = n / 2;
    let mut taps = Vec::with_capacity(out * out * 9);
    for oy in 0..out {
        for ox in 0..out {
            for ky in 0..3 {
                for kx in 0..3 {
                    let iy = (2 * oy + ky) as isize - 1;
                    let ix = (2 * ox + kx) as isize - 1;
                    let inside = iy >= 0 && ix >= 0 && (iy as usize) < n && (ix as usize) < n;
                    taps.push(inside.then(|| iy as usize * n + ix as usize));
                }
            }
        }
    }
    taps
}

/// Averages non-overlapping 2x2 cells of an `n x n` grid: `[n*n, (n/2)^2]`.
fn pool_matrix(n: usize) -> Tensor {
    let h = n / 2;
    Tensor::from_fn(&[n * n, h * h], |i| {
        let (src, dst) = (i / (h * h), i % (h * h));
        let (sy, sx) = (src / n, src % n);
        f64::from(sy / 2 == dst / h && sx / 2 == dst % h) * 0.25
    })
}

impl LocalEncoder {
    pub const CONV1: usize = 8;
    pub const CONV2: usize = 16;

    pub fn new<R: Rng>(ps: &mut ParamStore, name: &str, cfg: &ModelConfig, rng: &mut R) -> Self {
        let tokens = cfg.local_tokens();
        Self {
            conv1: Linear::new(ps, &format!("{name}.conv1"), 9, Self::CONV1, rng),
            conv2: Linear::new(ps, &format!("{name}.conv2"), 9 * Self::CONV1, Self::CONV2, rng),
            token_proj: Linear::new(ps, &format!("{name}.token"), Self::CONV2, cfg.dim, rng),
            cls_proj: Linear::new(ps, &format!("{name}.cls"), Self::CONV2, cfg.dim, rng),
            pos: ps.add(format!("{name}.pos"), normal_like_init(rng, &[tokens, cfg.dim], 0.02)),
            ln_f: LayerNorm::new(ps, &format!("{name}.ln_f"), cfg.dim),
            probe: Linear::new(ps, &format!("{name}.probe"), cfg.dim, 1, rng),
            res: cfg.local_res,
            c1: Self::CONV1,
        }
    }

    /// Parameters of the encoder proper, without the probe.
    pub fn encoder_params(&self) -> Vec<ParamId> {
        let mut p = Vec::new();
        for l in [&self.conv1, &self.conv2, &self.token_proj, &self.cls_proj] {
            p.extend(l.params());
        }
        p.push(self.pos);
        p.extend(self.ln_f.params());
        p
    }

    pub fn forward(&self, g: &mut Graph, ps: &ParamStore, crops: &[&[f64]]) -> Result<Var> {
        let (r, b) = (self.res, crops.len());
        for c in crops {
            if c.len() != r * r {
                return Err(TensorError::Invalid {
                    op: "encode_face_local",
                    msg: format!("expected {r}x{r} crop, got {} pixels", c.len()),
                });
            }
        }
        // first convolution: the input is constant, so unfold it directly
        let taps1 = conv_taps(r);
        let n1 = r / 2;
        let cols = Tensor::from_fn(&[b, n1 * n1, 9], |i| {
            let (bi, t) = (i / taps1.len(), i % taps1.len());
            taps1[t].map_or(0.0, |src| crops[bi][src])
        });
        let cols = g.constant(cols)?;
        let h1 = self.conv1.forward(g, ps, cols)?;
        let h1 = g.gelu(h1)?;

        // second convolution: gather taps from the tracked activations plus a zero row
        let flat = g.reshape(h1, &[b * n1 * n1, self.c1])?;
        let zero = g.constant(Tensor::zeros(&[1, self.c1]))?;
        let table = g.concat(&[flat, zero], 0)?;
        let taps2 = conv_taps(n1);
        let pad = b * n1 * n1;
        let ids: Vec<usize> = (0..b)
            .flat_map(|bi| taps2.iter().map(move |t| t.map_or(pad, |src| bi * n1 * n1 + src)))
            .collect();
        let n2 = n1 / 2;
        let cols2 = g.embedding_lookup(table, &ids, &[b, n2 * n2, 9])?;
        let cols2 = g.reshape(cols2, &[b, n2 * n2, 9 * self.c1])?;
        let h2 = self.conv2.forward(g, ps, cols2)?;
        let h2 = g.gelu(h2)?; // [B, n2*n2, C2]

        let ht = g.transpose(h2)?; // [B, C2, n2*n2]
        let pool = g.constant(pool_matrix(n2))?;
        let pooled = g.matmul(ht, pool)?;
        let pooled = g.transpose(pooled)?; // [B, tokens, C2]
        let avg = g.constant(Tensor::full(&[n2 * n2, 1], 1.0 / (n2 * n2) as f64))?;
        let gap = g.matmul(ht, avg)?;
        let gap = g.reshape(gap, &[b, 1, Self::CONV2])?;

        let tokens = self.token_proj.forward(g, ps, pooled)?;
        let pos = g.param(ps, self.pos)?;
        let tokens = g.add(tokens, pos)?;
        let cls = self.cls_proj.forward(g, ps, gap)?;
        let x = g.concat(&[cls, tokens], 1)?;
        self.ln_f.forward(g, ps, x)
    }

    /// Standalone real/fake logit `[B, 1]` from the cls row of `e_d`.
    pub fn probe_logit(&self, g: &mut Graph, ps: &ParamStore, e_d: Var) -> Result<Var> {
        let b = g.shape(e_d)[0];
        let d = g.shape(e_d)[2];
        let cls = g.slice(e_d, 1, 0, 1)?;
        let cls = g.reshape(cls, &[b, d])?;
        self.probe.forward(g, ps, cls)
    }
}
