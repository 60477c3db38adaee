//! Image-text contrastive alignment with manipulated counterparts as hard
//! negatives.
//!
//! Every authentic pair is an anchor. Its negatives are all other texts (for
//! the image-to-text direction) or images (text-to-image) in the contrastive
//! set, which holds the batch plus the counterparts of its samples. A
//! candidate that is an unmanipulated copy of the anchor's own content is not
//! a negative: a text-only fake shares its image with the original, so that
//! image is skipped in the text-to-image direction.

use rand::Rng;

use crate::nn::Linear;
use crate::tensor::{Graph, ParamId, ParamStore, Result, Tensor, TensorError, Var, NEG_INF_SURROGATE};

pub const DEFAULT_TAU: f64 = 0.07;

/// Dot product of two unit vectors.
pub fn similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(TensorError::ShapeMismatch {
            op: "similarity",
            lhs: vec![a.len()],
            rhs: vec![b.len()],
        });
    }
    Ok(a.iter().zip(b).map(|(x, y)| x * y).sum())
}

/// Projection heads `h_v`, `h_t` and the learnable log-temperature.
#[derive(Clone, Debug)]
pub struct FcaHeads {
    pub h_v: Linear,
    pub h_t: Linear,
    pub log_tau: ParamId,
}

impl FcaHeads {
    pub fn new<R: Rng>(ps: &mut ParamStore, name: &str, dim: usize, proj: usize, rng: &mut R) -> Self {
        Self {
            h_v: Linear::new(ps, &format!("{name}.h_v"), dim, proj, rng),
            h_t: Linear::new(ps, &format!("{name}.h_t"), dim, proj, rng),
            log_tau: ps.add(format!("{name}.log_tau"), Tensor::full(&[1], DEFAULT_TAU.ln())),
        }
    }

    /// L2-normalized projections of the cls rows of `e_v` and `e_t`, `[N, proj]` each.
    pub fn project(&self, g: &mut Graph, ps: &ParamStore, e_v: Var, e_t: Var) -> Result<(Var, Var)> {
        let cls = |g: &mut Graph, e: Var| -> Result<Var> {
            let (n, d) = (g.shape(e)[0], g.shape(e)[2]);
            let c = g.slice(e, 1, 0, 1)?;
            g.reshape(c, &[n, d])
        };
        let cv = cls(g, e_v)?;
        let ct = cls(g, e_t)?;
        let pv = self.h_v.forward(g, ps, cv)?;
        let pt = self.h_t.forward(g, ps, ct)?;
        Ok((g.l2_normalize(pv)?, g.l2_normalize(pt)?))
    }
}

/// Who contrasts against whom inside a contrastive set of `n` pairs.
#[derive(Clone, Debug, PartialEq)]
pub struct ContrastiveBatch {
    pub n: usize,
    pub anchors: Vec<usize>,
    /// `[n, n]`, row = anchor image, column = candidate text; true removes the
    /// candidate from that anchor's denominator.
    pub blocked_i2t: Vec<bool>,
    /// Row = anchor text, column = candidate image.
    pub blocked_t2i: Vec<bool>,
    pub counterpart: Vec<Option<usize>>,
}

impl ContrastiveBatch {
    /// Plain in-batch contrast: every pair is an anchor, every other sample a negative.
    pub fn in_batch(n: usize) -> Self {
        Self {
            n,
            anchors: (0..n).collect(),
            blocked_i2t: vec![false; n * n],
            blocked_t2i: vec![false; n * n],
            counterpart: vec![None; n],
        }
    }

    /// Authentic rows become anchors. `image_key`/`text_key` identify content:
    /// a candidate whose content equals the anchor's own is skipped.
    pub fn with_counterparts(
        authentic: &[bool],
        counterpart: &[Option<usize>],
        image_key: &[u64],
        text_key: &[u64],
    ) -> Self {
        let n = authentic.len();
        assert!(counterpart.len() == n && image_key.len() == n && text_key.len() == n);
        let mut blocked_i2t = vec![false; n * n];
        let mut blocked_t2i = vec![false; n * n];
        let anchors: Vec<usize> = (0..n).filter(|&i| authentic[i]).collect();
        for &i in &anchors {
            for j in (0..n).filter(|&j| j != i) {
                blocked_i2t[i * n + j] = text_key[j] == text_key[i];
                blocked_t2i[i * n + j] = image_key[j] == image_key[i];
            }
        }
        Self {
            n,
            anchors,
            blocked_i2t,
            blocked_t2i,
            counterpart: counterpart.to_vec(),
        }
    }

    /// Same anchors with each anchor's counterpart removed from its negatives.
    pub fn without_counterpart_negatives(&self) -> Self {
        let mut out = self.clone();
        for &i in &self.anchors {
            if let Some(c) = self.counterpart[i] {
                out.blocked_i2t[i * self.n + c] = true;
                out.blocked_t2i[i * self.n + c] = true;
            }
        }
        out
    }

    fn negatives(&self, blocked: &[bool], i: usize) -> usize {
        (0..self.n).filter(|&j| j != i && !blocked[i * self.n + j]).count()
    }
}

/// One direction: rows of `s` are anchors' similarities to candidates.
fn direction(g: &mut Graph, logits: Var, n: usize, anchors: &[usize], blocked: &[bool], strict: bool) -> Result<Var> {
    let mut mask = vec![0.0; n * n];
    for &i in anchors {
        for j in 0..n {
            if (j == i && strict) || (j != i && blocked[i * n + j]) {
                mask[i * n + j] = 1.0;
            }
        }
    }
    let masked = g.masked_fill(logits, &Tensor::new(vec![n, n], mask.clone())?, NEG_INF_SURROGATE)?;
    // log-sum-exp with a constant per-row shift; it cancels in value and gradient
    let lv = g.value(logits).data();
    let shifts: Vec<f64> = (0..n)
        .map(|i| {
            (0..n)
                .filter(|&j| mask[i * n + j] == 0.0)
                .map(|j| lv[i * n + j])
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .collect();
    let neg_shift = g.constant(Tensor::from_fn(&[n, n], |k| -shifts[k / n]))?;
    let shifted = g.add(masked, neg_shift)?;
    let e = g.exp(shifted)?;
    let denom = g.sum_lastdim(e)?;
    let col = g.reshape(denom, &[n, 1])?;
    let picked = g.embedding_lookup(col, anchors, &[anchors.len()])?;
    let lse = g.log(picked)?;
    let back = g.constant(Tensor::new(
        vec![anchors.len(), 1],
        anchors.iter().map(|&i| shifts[i]).collect(),
    )?)?;
    let lse = g.add(lse, back)?;
    let flat = g.reshape(logits, &[n * n, 1])?;
    let diag_ids: Vec<usize> = anchors.iter().map(|&i| i * n + i).collect();
    let pos = g.embedding_lookup(flat, &diag_ids, &[anchors.len()])?;
    let per = g.sub(lse, pos)?;
    g.mean(per)
}

/// Symmetric contrastive loss `(L_v2t + L_t2v) / 2` over L2-normalized
/// projections `img`, `txt` (`[n, p]`) at temperature `exp(log_tau)`.
///
/// With `negatives_only_denominator` the positive is left out of each softmax
/// denominator; the loss is then unbounded below.
pub fn itc_loss(
    g: &mut Graph,
    img: Var,
    txt: Var,
    log_tau: Var,
    batch: &ContrastiveBatch,
    negatives_only_denominator: bool,
) -> Result<Var> {
    let invalid = |msg: String| TensorError::Invalid { op: "itc_loss", msg };
    if g.shape(img) != g.shape(txt) || g.shape(img).len() != 2 {
        return Err(TensorError::ShapeMismatch {
            op: "itc_loss",
            lhs: g.shape(img).to_vec(),
            rhs: g.shape(txt).to_vec(),
        });
    }
    let n = g.shape(img)[0];
    if n != batch.n || n < 2 {
        return Err(invalid(format!(
            "contrastive set of {n} rows, batch describes {}",
            batch.n
        )));
    }
    if batch.anchors.is_empty() {
        return Err(invalid("no anchors".into()));
    }
    for &i in &batch.anchors {
        if batch.negatives(&batch.blocked_i2t, i) == 0 || batch.negatives(&batch.blocked_t2i, i) == 0 {
            return Err(invalid(format!("anchor {i} has no negatives")));
        }
    }
    let tau = g.value(log_tau).data()[0].exp();
    if tau.is_nan() || tau <= 0.0 {
        return Err(invalid(format!("temperature {tau}")));
    }
    let tt = g.transpose(txt)?;
    let s = g.matmul(img, tt)?;
    // divide by tau: the [1]-shaped factor broadcasts over a flat view
    let neg = g.scale(log_tau, -1.0)?;
    let inv_tau = g.exp(neg)?;
    let flat = g.reshape(s, &[n * n, 1])?;
    let scaled = g.mul(flat, inv_tau)?;
    let logits = g.reshape(scaled, &[n, n])?;
    let logits_t = g.transpose(logits)?;
    let v2t = direction(
        g,
        logits,
        n,
        &batch.anchors,
        &batch.blocked_i2t,
        negatives_only_denominator,
    )?;
    let t2v = direction(
        g,
        logits_t,
        n,
        &batch.anchors,
        &batch.blocked_t2i,
        negatives_only_denominator,
    )?;
    let sum = g.add(v2t, t2v)?;
    g.scale(sum, 0.5)
}
