//! The assembled detector: encoders, contrastive heads, shared query
//! transformer, stream fusion and detection heads.

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{crop_face, Dataset, Sample, Vocab};
use crate::encoders::{Encoded, ImageAttention, ImageEncoder, LocalEncoder, TextEncoder};
use crate::fca::{itc_loss, ContrastiveBatch, FcaHeads};
use crate::heads::{
    binary_loss, grounding_loss, multilabel_loss, total_loss, Component, Heads, LossFlags, NUM_CLASSES,
};
use crate::mlgf::{CrossFuse, MaskMode, QFormer, QFormerOutput};
use crate::tensor::{Graph, ParamId, ParamStore, Result, Tensor, TensorError, Var};

/// Negative pool of the contrastive loss.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContrastMode {
    /// Authentic anchors; counterparts join the pool as hard negatives.
    #[default]
    Counterpart,
    /// Every pair is an anchor against the rest of the batch; no counterparts.
    InBatch,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub dim: usize,
    pub heads: usize,
    pub encoder_blocks: usize,
    pub qformer_blocks: usize,
    pub ffn_hidden: usize,
    pub image_size: usize,
    pub patch: usize,
    pub max_len: usize,
    pub vocab_size: usize,
    pub local_res: usize,
    pub proj_dim: usize,
    pub mask_mode: MaskMode,
    pub fusion_residual: bool,
    pub share_cls_heads: bool,
    pub negatives_only_denominator: bool,
    pub contrast: ContrastMode,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            dim: 32,
            heads: 4,
            encoder_blocks: 2,
            qformer_blocks: 2,
            ffn_hidden: 64,
            image_size: 32,
            patch: 8,
            max_len: 16,
            vocab_size: Vocab::default().size(),
            local_res: 16,
            proj_dim: 16,
            mask_mode: MaskMode::Bidirectional,
            fusion_residual: true,
            share_cls_heads: false,
            negatives_only_denominator: false,
            contrast: ContrastMode::Counterpart,
        }
    }
}

impl ModelConfig {
    pub fn num_patches(&self) -> usize {
        let g = self.image_size / self.patch;
        g * g
    }

    pub fn local_tokens(&self) -> usize {
        let g = self.local_res / 8;
        g * g
    }

    pub fn num_queries(&self) -> usize {
        1 + self.max_len
    }

    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.dim == 0 || self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return Err(format!(
                "dim {} must be a positive multiple of heads {}",
                self.dim, self.heads
            ));
        }
        if self.patch == 0 || !self.image_size.is_multiple_of(self.patch) {
            return Err(format!(
                "image size {} not divisible by patch {}",
                self.image_size, self.patch
            ));
        }
        if self.local_res < 8 || !self.local_res.is_multiple_of(8) {
            return Err(format!("local resolution {} must be a multiple of 8", self.local_res));
        }
        if self.max_len == 0 || self.vocab_size < 2 || self.proj_dim == 0 || self.ffn_hidden == 0 {
            return Err("max_len, vocab_size, proj_dim and ffn_hidden must be positive".into());
        }
        if self.encoder_blocks == 0 || self.qformer_blocks == 0 {
            return Err("at least one encoder and one query-transformer block".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub image: ImageEncoder,
    pub text: TextEncoder,
    pub local: LocalEncoder,
    pub fca: FcaHeads,
    pub qformer: QFormer,
    pub fuse: CrossFuse,
    pub heads: Heads,
}

/// Extra rows for the contrastive set: counterparts of batch samples that are
/// not themselves in the batch.
#[derive(Clone, Debug, Default)]
pub struct ContrastExtras {
    pub images: Vec<Vec<f64>>,
    pub tokens: Vec<Vec<u32>>,
    /// Over batch rows followed by extra rows.
    pub authentic: Vec<bool>,
    pub counterpart: Vec<Option<usize>>,
    pub image_key: Vec<u64>,
    pub text_key: Vec<u64>,
}

/// Model-ready tensors for a list of samples.
#[derive(Clone, Debug)]
pub struct Batch {
    pub ids: Vec<String>,
    pub images: Vec<Vec<f64>>,
    pub crops: Vec<Vec<f64>>,
    pub tokens: Vec<Vec<u32>>,
    pub label_binary: Vec<f64>,
    /// `[B, 4]`
    pub label_multi: Tensor,
    /// `[B, T]`
    pub grounding: Tensor,
    pub contrast: Option<ContrastExtras>,
}

fn content_key<T: Copy>(xs: &[T], bits: impl Fn(T) -> u64) -> u64 {
    xs.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, &x| {
        (h ^ bits(x)).wrapping_mul(0x0000_0100_0000_01b3).rotate_left(5)
    })
}

impl Batch {
    /// Builds a batch of `ds.samples[idx]`. In counterpart mode, the
    /// counterpart of each sample joins the contrastive set, read from the
    /// batch when present and otherwise appended as an extra row. In
    /// in-batch mode the contrastive set is the batch alone.
    pub fn from_samples(
        ds: &Dataset,
        lookup: &HashMap<&str, usize>,
        idx: &[usize],
        cfg: &ModelConfig,
        with_contrast: bool,
    ) -> Result<Self> {
        let samples: Vec<&Sample> = idx.iter().map(|&i| &ds.samples[i]).collect();
        let b = samples.len();
        let t = cfg.max_len;
        let mut crops = Vec::with_capacity(b);
        let mut tokens = Vec::with_capacity(b);
        for s in &samples {
            crops.push(
                crop_face(&s.image, s.width, s.height, &s.face_box, cfg.local_res).map_err(|e| {
                    TensorError::Invalid {
                        op: "batch",
                        msg: e.to_string(),
                    }
                })?,
            );
            if s.tokens.len() > t {
                return Err(TensorError::Invalid {
                    op: "batch",
                    msg: format!("{}: {} tokens exceed {t}", s.id, s.tokens.len()),
                });
            }
            let mut tk = s.tokens.clone();
            tk.resize(t, Vocab::PAD);
            tokens.push(tk);
        }
        let label_multi = Tensor::from_fn(&[b.max(1), NUM_CLASSES], |i| {
            samples
                .get(i / NUM_CLASSES)
                .map_or(0.0, |s| s.label_multi.to_multi_hot()[i % NUM_CLASSES])
        });
        let grounding = Tensor::from_fn(&[b.max(1), t], |i| {
            samples
                .get(i / t)
                .and_then(|s| s.grounding_mask.get(i % t))
                .map_or(0.0, |&m| f64::from(m))
        });

        let contrast = with_contrast.then(|| {
            let mut ex = ContrastExtras::default();
            let mut row_of: HashMap<&str, usize> =
                samples.iter().enumerate().map(|(r, s)| (s.id.as_str(), r)).collect();
            let mut rows: Vec<&Sample> = samples.clone();
            // plain in-batch contrast sees only the batch itself
            let with_counterparts = cfg.contrast == ContrastMode::Counterpart;
            for s in samples.iter().filter(|_| with_counterparts) {
                if let Some(cp) = s.counterpart_id.as_deref() {
                    if !row_of.contains_key(cp) {
                        if let Some(&i) = lookup.get(cp) {
                            row_of.insert(cp, rows.len());
                            rows.push(&ds.samples[i]);
                        }
                    }
                }
            }
            for s in &rows[b..] {
                ex.images.push(s.image.clone());
                let mut tk = s.tokens.clone();
                tk.resize(t, Vocab::PAD);
                ex.tokens.push(tk);
            }
            for s in &rows {
                ex.authentic.push(!s.is_fake());
                ex.counterpart
                    .push(s.counterpart_id.as_deref().and_then(|c| row_of.get(c).copied()));
                ex.image_key.push(content_key(&s.image, f64::to_bits));
                ex.text_key.push(content_key(&s.tokens, u64::from));
            }
            ex
        });

        Ok(Self {
            ids: samples.iter().map(|s| s.id.clone()).collect(),
            images: samples.iter().map(|s| s.image.clone()).collect(),
            crops,
            tokens,
            label_binary: samples.iter().map(|s| f64::from(s.label_binary)).collect(),
            label_multi,
            grounding,
            contrast,
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

/// Everything a forward pass produces. Attention weights are kept for export.
pub struct Forward {
    pub e_v: Var,
    pub e_t: Var,
    pub e_d: Var,
    /// `[B, T]` text validity.
    pub valid: Tensor,
    pub global: QFormerOutput,
    pub local: QFormerOutput,
    pub f: Var,
    pub fuse_weights: Var,
    pub image_attn: Vec<Vec<Var>>,
    pub text_attn: Vec<Vec<Var>>,
    /// `[B, 1]`
    pub binary: Var,
    /// `[B, 4]`
    pub multi: Var,
    /// `[B, T]`
    pub grounding: Var,
    /// Projections over the full contrastive set (batch rows first).
    pub img_proj: Option<Var>,
    pub txt_proj: Option<Var>,
}

pub struct LossOutput {
    pub forward: Forward,
    pub components: Vec<(Component, Var)>,
    pub total: Var,
}

/// Plain-number predictions for one batch.
#[derive(Clone, Debug, PartialEq)]
pub struct Predictions {
    pub binary: Vec<f64>,
    pub multi: Vec<[f64; NUM_CLASSES]>,
    pub grounding: Vec<Vec<f64>>,
    pub valid: Vec<Vec<bool>>,
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

impl Model {
    pub fn new(cfg: &ModelConfig, seed: u64) -> std::result::Result<(Self, ParamStore), String> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamStore::new();
        let model = Self {
            cfg: cfg.clone(),
            image: ImageEncoder::new(&mut ps, "image", cfg, &mut rng),
            text: TextEncoder::new(&mut ps, "text", cfg, &mut rng),
            local: LocalEncoder::new(&mut ps, "local", cfg, &mut rng),
            fca: FcaHeads::new(&mut ps, "fca", cfg.dim, cfg.proj_dim, &mut rng),
            qformer: QFormer::new(
                &mut ps,
                "qformer",
                cfg.dim,
                cfg.heads,
                cfg.ffn_hidden,
                cfg.qformer_blocks,
                cfg.max_len,
                &mut rng,
            ),
            fuse: CrossFuse::new(&mut ps, "fuse", cfg.dim, cfg.fusion_residual, &mut rng),
            heads: Heads::new(&mut ps, "heads", cfg.dim, cfg.share_cls_heads, &mut rng),
        };
        Ok((model, ps))
    }

    /// Parameters whose names start with `prefix`.
    pub fn params_with_prefix(ps: &ParamStore, prefix: &str) -> Vec<ParamId> {
        ps.ids().filter(|&id| ps.name(id).starts_with(prefix)).collect()
    }

    pub fn forward(&self, g: &mut Graph, ps: &ParamStore, batch: &Batch) -> Result<Forward> {
        let b = batch.len();
        if b == 0 {
            return Err(TensorError::Invalid {
                op: "forward",
                msg: "empty batch".into(),
            });
        }
        let extras = batch.contrast.as_ref().map_or(0, |c| c.images.len());
        let mut images: Vec<&[f64]> = batch.images.iter().map(|v| v.as_slice()).collect();
        let mut tokens: Vec<&[u32]> = batch.tokens.iter().map(|v| v.as_slice()).collect();
        if let Some(c) = &batch.contrast {
            images.extend(c.images.iter().map(|v| v.as_slice()));
            tokens.extend(c.tokens.iter().map(|v| v.as_slice()));
        }
        let Encoded {
            emb: e_v_all,
            attn: image_attn,
        } = self.image.forward(g, ps, &images, ImageAttention::Full)?;
        let (
            Encoded {
                emb: e_t_all,
                attn: text_attn,
            },
            valid_all,
        ) = self.text.forward(g, ps, &tokens)?;
        if g.shape(e_t_all)[1] != self.cfg.max_len {
            return Err(TensorError::Invalid {
                op: "forward",
                msg: format!("tokens must be padded to {}", self.cfg.max_len),
            });
        }
        let (e_v, e_t) = if extras > 0 {
            (g.slice(e_v_all, 0, 0, b)?, g.slice(e_t_all, 0, 0, b)?)
        } else {
            (e_v_all, e_t_all)
        };
        let t = self.cfg.max_len;
        let valid = Tensor::new(vec![b, t], valid_all.data()[..b * t].to_vec())?;

        let crops: Vec<&[f64]> = batch.crops.iter().map(|v| v.as_slice()).collect();
        let e_d = self.local.forward(g, ps, &crops)?;

        let mode = self.cfg.mask_mode;
        let global = self.qformer.forward(g, ps, e_v, e_t, &valid, mode)?;
        let local = self.qformer.forward(g, ps, e_d, e_t, &valid, mode)?;
        let (f, fuse_weights) = self.fuse.forward(g, ps, local.queries, global.queries)?;

        let f_cls = Heads::cls(g, f)?;
        let binary = self.heads.binary_logit(g, ps, f_cls)?;
        let multi = self.heads.multi_logits(g, ps, f_cls)?;
        let grounding = self.heads.grounding_logits(g, ps, f)?;

        let (img_proj, txt_proj) = if batch.contrast.is_some() {
            let (i, t) = self.fca.project(g, ps, e_v_all, e_t_all)?;
            (Some(i), Some(t))
        } else {
            (None, None)
        };
        Ok(Forward {
            e_v,
            e_t,
            e_d,
            valid,
            global,
            local,
            f,
            fuse_weights,
            image_attn,
            text_attn,
            binary,
            multi,
            grounding,
            img_proj,
            txt_proj,
        })
    }

    /// The contrastive set and anchors for `batch` under the configured mode,
    /// or `None` when no anchor exists.
    pub fn contrastive_batch(&self, batch: &Batch) -> Option<ContrastiveBatch> {
        let c = batch.contrast.as_ref()?;
        let cb = match self.cfg.contrast {
            ContrastMode::Counterpart => {
                ContrastiveBatch::with_counterparts(&c.authentic, &c.counterpart, &c.image_key, &c.text_key)
            }
            ContrastMode::InBatch => ContrastiveBatch::in_batch(c.authentic.len()),
        };
        (!cb.anchors.is_empty() && cb.n >= 2).then_some(cb)
    }

    /// Forward pass plus every enabled loss component and their sum.
    pub fn losses(&self, g: &mut Graph, ps: &ParamStore, batch: &Batch, flags: &LossFlags) -> Result<LossOutput> {
        let fw = self.forward(g, ps, batch)?;
        let mut components = Vec::new();
        if flags.itc {
            let v = match (self.contrastive_batch(batch), fw.img_proj, fw.txt_proj) {
                (Some(cb), Some(i), Some(t)) => {
                    let log_tau = g.param(ps, self.fca.log_tau)?;
                    itc_loss(g, i, t, log_tau, &cb, self.cfg.negatives_only_denominator)?
                }
                _ => g.constant(Tensor::scalar(0.0))?,
            };
            components.push((Component::Itc, v));
        }
        if flags.d {
            let cls = Heads::cls(g, fw.local.queries)?;
            let z = self.heads.local_binary_logit(g, ps, cls)?;
            components.push((Component::Local, binary_loss(g, z, &batch.label_binary)?));
        }
        if flags.v {
            let cls = Heads::cls(g, fw.global.queries)?;
            let z = self.heads.global_multi_logits(g, ps, cls)?;
            components.push((Component::Global, multilabel_loss(g, z, &batch.label_multi)?));
        }
        if flags.blc {
            components.push((Component::Blc, binary_loss(g, fw.binary, &batch.label_binary)?));
        }
        if flags.mlc {
            components.push((Component::Mlc, multilabel_loss(g, fw.multi, &batch.label_multi)?));
        }
        if flags.tmg {
            components.push((
                Component::Tmg,
                grounding_loss(g, fw.grounding, &batch.grounding, &fw.valid)?,
            ));
        }
        let total = total_loss(g, &components, flags)?;
        Ok(LossOutput {
            forward: fw,
            components,
            total,
        })
    }

    /// Auxiliary real/fake loss of the local encoder's probe.
    pub fn probe_loss(&self, g: &mut Graph, ps: &ParamStore, crops: &[&[f64]], labels: &[f64]) -> Result<Var> {
        let e_d = self.local.forward(g, ps, crops)?;
        let z = self.local.probe_logit(g, ps, e_d)?;
        binary_loss(g, z, labels)
    }

    pub fn predict(&self, ps: &ParamStore, batch: &Batch) -> Result<Predictions> {
        let mut g = Graph::new();
        let fw = self.forward(&mut g, ps, batch)?;
        Ok(self.read_predictions(&g, &fw))
    }

    pub fn read_predictions(&self, g: &Graph, fw: &Forward) -> Predictions {
        let b = g.shape(fw.binary)[0];
        let t = self.cfg.max_len;
        let bin = g.value(fw.binary).data();
        let multi = g.value(fw.multi).data();
        let grd = g.value(fw.grounding).data();
        Predictions {
            binary: bin.iter().map(|&z| sigmoid(z)).collect(),
            multi: (0..b)
                .map(|i| std::array::from_fn(|k| sigmoid(multi[i * NUM_CLASSES + k])))
                .collect(),
            grounding: (0..b)
                .map(|i| grd[i * t..(i + 1) * t].iter().map(|&z| sigmoid(z)).collect())
                .collect(),
            valid: (0..b)
                .map(|i| fw.valid.data()[i * t..(i + 1) * t].iter().map(|&v| v == 1.0).collect())
                .collect(),
        }
    }
}
