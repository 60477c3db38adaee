//! Detection heads over fused features and the training objective.

use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::nn::{bce_with_logits, Linear, Mlp};
use crate::tensor::{Graph, ParamId, ParamStore, Result, Tensor, TensorError, Var};

pub const NUM_CLASSES: usize = 4;

/// The six loss components, in reporting order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Component {
    #[serde(rename = "ITC")]
    Itc,
    #[serde(rename = "d")]
    Local,
    #[serde(rename = "v")]
    Global,
    #[serde(rename = "BLC")]
    Blc,
    #[serde(rename = "MLC")]
    Mlc,
    #[serde(rename = "TMG")]
    Tmg,
}

impl Component {
    pub const ALL: [Component; 6] = [
        Component::Itc,
        Component::Local,
        Component::Global,
        Component::Blc,
        Component::Mlc,
        Component::Tmg,
    ];

    pub fn key(self) -> &'static str {
        match self {
            Component::Itc => "itc",
            Component::Local => "d",
            Component::Global => "v",
            Component::Blc => "blc",
            Component::Mlc => "mlc",
            Component::Tmg => "tmg",
        }
    }
}

impl fmt::Display for Component {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Component::Itc => "ITC",
            Component::Local => "d",
            Component::Global => "v",
            Component::Blc => "BLC",
            Component::Mlc => "MLC",
            Component::Tmg => "TMG",
        })
    }
}

/// Which loss components enter the total.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossFlags {
    pub itc: bool,
    pub d: bool,
    pub v: bool,
    pub blc: bool,
    pub mlc: bool,
    pub tmg: bool,
}

impl Default for LossFlags {
    fn default() -> Self {
        Self::all()
    }
}

impl LossFlags {
    pub fn all() -> Self {
        Self {
            itc: true,
            d: true,
            v: true,
            blc: true,
            mlc: true,
            tmg: true,
        }
    }

    pub fn none() -> Self {
        Self {
            itc: false,
            d: false,
            v: false,
            blc: false,
            mlc: false,
            tmg: false,
        }
    }

    pub fn from_components(c: &[Component]) -> Self {
        let mut f = Self::none();
        for &k in c {
            f.set(k, true);
        }
        f
    }

    pub fn enabled(&self, c: Component) -> bool {
        match c {
            Component::Itc => self.itc,
            Component::Local => self.d,
            Component::Global => self.v,
            Component::Blc => self.blc,
            Component::Mlc => self.mlc,
            Component::Tmg => self.tmg,
        }
    }

    pub fn set(&mut self, c: Component, on: bool) {
        match c {
            Component::Itc => self.itc = on,
            Component::Local => self.d = on,
            Component::Global => self.v = on,
            Component::Blc => self.blc = on,
            Component::Mlc => self.mlc = on,
            Component::Tmg => self.tmg = on,
        }
    }

    pub fn components(&self) -> Vec<Component> {
        Component::ALL.into_iter().filter(|&c| self.enabled(c)).collect()
    }
}

/// Unweighted sum of the enabled components. `values` holds one entry per
/// enabled component; disabled components must be absent.
pub fn total_loss(g: &mut Graph, values: &[(Component, Var)], flags: &LossFlags) -> Result<Var> {
    if flags.components().is_empty() {
        return Err(TensorError::Invalid {
            op: "total_loss",
            msg: "all loss components disabled".into(),
        });
    }
    let mut total: Option<Var> = None;
    for &(c, v) in values {
        if !flags.enabled(c) {
            return Err(TensorError::Invalid {
                op: "total_loss",
                msg: format!("component {c} is disabled"),
            });
        }
        total = Some(match total {
            None => v,
            Some(t) => g.add(t, v)?,
        });
    }
    total.ok_or_else(|| TensorError::Invalid {
        op: "total_loss",
        msg: "no component values".into(),
    })
}

/// Batch-mean binary cross-entropy of logits `[B, 1]` against `labels`.
pub fn binary_loss(g: &mut Graph, logits: Var, labels: &[f64]) -> Result<Var> {
    let b = labels.len();
    let y = Tensor::new(vec![b, 1], labels.to_vec())?;
    let l = bce_with_logits(g, logits, &y)?;
    g.mean(l)
}

/// Per-class binary cross-entropy summed over classes, averaged over the
/// batch. `targets` is `[B, 4]` multi-hot.
pub fn multilabel_loss(g: &mut Graph, logits: Var, targets: &Tensor) -> Result<Var> {
    let b = targets.shape()[0];
    let l = bce_with_logits(g, logits, targets)?;
    let s = g.sum(l)?;
    g.scale(s, 1.0 / b as f64)
}

/// Per-position binary cross-entropy averaged over the valid positions of
/// each sample, then over the batch. Padding positions contribute exactly 0.
pub fn grounding_loss(g: &mut Graph, logits: Var, targets: &Tensor, valid: &Tensor) -> Result<Var> {
    let (b, t) = (valid.shape()[0], valid.shape()[1]);
    let l = bce_with_logits(g, logits, targets)?;
    let w = Tensor::from_fn(&[b, t], |i| {
        let row = &valid.data()[(i / t) * t..(i / t + 1) * t];
        let n = row.iter().sum::<f64>();
        if n > 0.0 {
            valid.data()[i] / (n * b as f64)
        } else {
            0.0
        }
    });
    let wv = g.constant(w)?;
    let weighted = g.mul(l, wv)?;
    g.sum(weighted)
}

/// Binary and multi-label classifiers over the cls row, and the per-position
/// grounding classifier over the remaining rows.
#[derive(Clone, Debug)]
pub struct Heads {
    pub binary: Mlp,
    pub multi: Mlp,
    pub grounding: Linear,
    /// Classifiers for the stream-level losses; `None` when they reuse the
    /// final ones.
    pub local_binary: Option<Mlp>,
    pub global_multi: Option<Mlp>,
}

impl Heads {
    pub fn new<R: Rng>(ps: &mut ParamStore, name: &str, dim: usize, share_cls_heads: bool, rng: &mut R) -> Self {
        Self {
            binary: Mlp::new(ps, &format!("{name}.binary"), (dim, dim, 1), rng),
            multi: Mlp::new(ps, &format!("{name}.multi"), (dim, dim, NUM_CLASSES), rng),
            grounding: Linear::new(ps, &format!("{name}.grounding"), dim, 1, rng),
            local_binary: (!share_cls_heads).then(|| Mlp::new(ps, &format!("{name}.local_binary"), (dim, dim, 1), rng)),
            global_multi: (!share_cls_heads)
                .then(|| Mlp::new(ps, &format!("{name}.global_multi"), (dim, dim, NUM_CLASSES), rng)),
        }
    }

    pub fn grounding_params(&self) -> Vec<ParamId> {
        self.grounding.params()
    }

    /// Row 0 of `[B, nq, d]` as `[B, d]`.
    pub fn cls(g: &mut Graph, f: Var) -> Result<Var> {
        let (b, d) = (g.shape(f)[0], g.shape(f)[2]);
        let c = g.slice(f, 1, 0, 1)?;
        g.reshape(c, &[b, d])
    }

    pub fn binary_logit(&self, g: &mut Graph, ps: &ParamStore, f_cls: Var) -> Result<Var> {
        self.binary.forward(g, ps, f_cls)
    }

    pub fn multi_logits(&self, g: &mut Graph, ps: &ParamStore, f_cls: Var) -> Result<Var> {
        self.multi.forward(g, ps, f_cls)
    }

    /// `[B, T]` logits from rows `1..` of `f`.
    pub fn grounding_logits(&self, g: &mut Graph, ps: &ParamStore, f: Var) -> Result<Var> {
        let (b, nq) = (g.shape(f)[0], g.shape(f)[1]);
        let tok = g.slice(f, 1, 1, nq - 1)?;
        let l = self.grounding.forward(g, ps, tok)?;
        g.reshape(l, &[b, nq - 1])
    }

    pub fn local_binary_logit(&self, g: &mut Graph, ps: &ParamStore, f_d_cls: Var) -> Result<Var> {
        self.local_binary
            .as_ref()
            .unwrap_or(&self.binary)
            .forward(g, ps, f_d_cls)
    }

    pub fn global_multi_logits(&self, g: &mut Graph, ps: &ParamStore, f_v_cls: Var) -> Result<Var> {
        self.global_multi
            .as_ref()
            .unwrap_or(&self.multi)
            .forward(g, ps, f_v_cls)
    }
}
