//! Hand-off of fused features to a text generator: the projection `h_LLM`,
//! prompt assembly, an HTTP client, and an offline stub that answers from the
//! detector's own heads.

use std::io::Read;
use std::time::Duration;

use base64::Engine;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{Dataset, ManipKind, ManipSet};
use crate::model::{Batch, Model, Predictions};
use crate::nn::{bce_with_logits, Linear};
use crate::tensor::checkpoint::{self, CheckpointError};
use crate::tensor::{Graph, ParamId, ParamStore, Result as TResult, Tensor, TensorError, Var};
use crate::trainer::{adamw_step, OptState, TrainConfig};

pub const BINARY_INSTRUCTION: &str = "Is this image-text pair manipulated?";
pub const TYPE_INSTRUCTION: &str = "What type of manipulation is involved?";
/// Stands in for the feature block inside the template string.
pub const FEATURE_PLACEHOLDER: &str = "(ImageFeature)";

#[derive(Debug, Error)]
pub enum BridgeError {
    #[error("instruction is empty")]
    EmptyInstruction,
    #[error("request timed out after {0:?}")]
    Timeout(Duration),
    #[error("service answered with status {0}")]
    Status(u16),
    #[error("malformed response: {0}")]
    Malformed(String),
    #[error("transport: {0}")]
    Transport(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

impl BridgeError {
    pub fn code(&self) -> u32 {
        match self {
            BridgeError::EmptyInstruction => 300,
            BridgeError::Timeout(_) => 301,
            BridgeError::Status(_) => 302,
            BridgeError::Malformed(_) => 303,
            BridgeError::Transport(_) => 304,
            BridgeError::Tensor(_) => 305,
            BridgeError::Checkpoint(_) => 306,
        }
    }
}

/// The projection `h_LLM` and a frozen linear readout that stands in for the
/// decoder when the projection is tuned offline.
pub struct Bridge {
    pub proj: Linear,
    pub readout: Linear,
    pub width: usize,
}

impl Bridge {
    /// With `identity` set and `width == dim`, the projection starts as the
    /// identity map.
    pub fn new<R: Rng>(ps: &mut ParamStore, dim: usize, width: usize, identity: bool, rng: &mut R) -> TResult<Self> {
        if width == 0 {
            return Err(TensorError::Invalid {
                op: "bridge",
                msg: "target width must be positive".into(),
            });
        }
        if identity && width != dim {
            return Err(TensorError::Invalid {
                op: "bridge",
                msg: format!("identity init needs width {dim}, got {width}"),
            });
        }
        let proj = Linear::new(ps, "bridge.proj", dim, width, rng);
        if identity {
            *ps.value_mut(proj.weight) = Tensor::eye(dim);
        }
        let readout = Linear::new(ps, "bridge.readout", width, 1 + ManipKind::ALL.len(), rng);
        for id in readout.params() {
            ps.set_trainable(id, false);
        }
        Ok(Self { proj, readout, width })
    }

    /// Row-wise `h_LLM(f)`: `[.., N_q, d] -> [.., N_q, width]`.
    pub fn project(&self, g: &mut Graph, ps: &ParamStore, f: Var) -> TResult<Var> {
        self.proj.forward(g, ps, f)
    }

    /// Offline tuning objective: the frozen readout of the projected summary
    /// row must recover the binary and multi-label targets.
    pub fn instruction_loss(&self, g: &mut Graph, ps: &ParamStore, projected: Var, targets: &Tensor) -> TResult<Var> {
        let cls = g.slice(projected, 1, 0, 1)?;
        let b = g.shape(cls)[0];
        let cls = g.reshape(cls, &[b, self.width])?;
        let z = self.readout.forward(g, ps, cls)?;
        let l = bce_with_logits(g, z, targets)?;
        g.mean(l)
    }

    pub fn save(&self, ps: &ParamStore, path: &std::path::Path) -> Result<(), BridgeError> {
        let recs: Vec<(&str, &Tensor)> = self
            .all_params()
            .into_iter()
            .map(|id| (ps.name(id), ps.value(id)))
            .collect();
        std::fs::write(path, checkpoint::encode(&recs)).map_err(CheckpointError::Io)?;
        Ok(())
    }

    pub fn load(&self, ps: &mut ParamStore, path: &std::path::Path) -> Result<(), BridgeError> {
        let buf = std::fs::read(path).map_err(CheckpointError::Io)?;
        for (name, t) in checkpoint::decode(&buf)? {
            let id = self
                .all_params()
                .into_iter()
                .find(|&id| ps.name(id) == name)
                .ok_or(CheckpointError::Unknown(name.clone()))?;
            if ps.value(id).shape() != t.shape() {
                return Err(CheckpointError::ShapeMismatch {
                    name,
                    expected: ps.value(id).shape().to_vec(),
                    found: t.shape().to_vec(),
                }
                .into());
            }
            *ps.value_mut(id) = t;
        }
        Ok(())
    }

    fn all_params(&self) -> Vec<ParamId> {
        let mut v = self.proj.params();
        v.extend(self.readout.params());
        v
    }
}

/// Binary and multi-label targets of each primary sample, `[B, 5]`.
fn instruction_targets(ds: &Dataset, idx: &[usize]) -> Tensor {
    let rows: Vec<f64> = idx
        .iter()
        .flat_map(|&i| {
            let s = &ds.samples[i];
            let mut r = vec![f64::from(s.label_binary)];
            r.extend(s.label_multi.to_multi_hot());
            r
        })
        .collect();
    Tensor::new(vec![idx.len(), 1 + ManipKind::ALL.len()], rows).expect("row count matches")
}

/// Tunes `h_LLM` alone on the instruction objective; every other parameter
/// in `ps` is frozen for the duration and its trainability restored after.
/// Returns the mean loss of the final pass.
pub fn finetune(
    model: &Model,
    bridge: &Bridge,
    ps: &mut ParamStore,
    ds: &Dataset,
    epochs: usize,
    lr: f64,
) -> TResult<f64> {
    let saved: Vec<(ParamId, bool)> = ps.ids().map(|id| (id, ps.is_trainable(id))).collect();
    for &(id, _) in &saved {
        ps.set_trainable(id, false);
    }
    for id in bridge.proj.params() {
        ps.set_trainable(id, true);
    }
    let cfg = TrainConfig {
        weight_decay: 0.0,
        ..TrainConfig::default()
    };
    let lookup = ds.index_by_id();
    let idx = ds.primary_indices();
    let mut opt = OptState::new(ps);
    let mut last = 0.0;
    for _ in 0..epochs {
        let mut sum = 0.0;
        let chunks: Vec<&[usize]> = idx.chunks(32).collect();
        for chunk in &chunks {
            let batch = Batch::from_samples(ds, &lookup, chunk, &model.cfg, false)?;
            let mut g = Graph::new();
            let fw = model.forward(&mut g, ps, &batch)?;
            let p = bridge.project(&mut g, ps, fw.f)?;
            let loss = bridge.instruction_loss(&mut g, ps, p, &instruction_targets(ds, chunk))?;
            sum += g.value(loss).item();
            let grads = g.backward(loss)?;
            adamw_step(ps, &grads, &mut opt, lr, &cfg);
        }
        last = sum / chunks.len().max(1) as f64;
    }
    for (id, t) in saved {
        ps.set_trainable(id, t);
    }
    Ok(last)
}

/// Feature block handed to the generator.
#[derive(Clone, Debug, PartialEq)]
pub enum FeatureBlock {
    /// `rows x width` projected features, sent next to the template.
    Rows(Tensor),
    /// Offline mode: only the placeholder appears.
    Placeholder,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PromptRecord {
    pub features: FeatureBlock,
    pub instruction: String,
    pub template: String,
}

pub fn build_prompt(features: FeatureBlock, instruction: &str) -> Result<PromptRecord, BridgeError> {
    if instruction.trim().is_empty() {
        return Err(BridgeError::EmptyInstruction);
    }
    let template = format!("###Human:(Img){FEATURE_PLACEHOLDER}(/Img){instruction} ###Assistant:");
    Ok(PromptRecord {
        features,
        instruction: instruction.to_string(),
        template,
    })
}

/// Thresholded head outputs of one sample.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct HeadOutputs {
    pub fake: bool,
    pub kinds: ManipSet,
}

impl HeadOutputs {
    pub fn from_predictions(p: &Predictions, row: usize) -> Self {
        let kinds = ManipKind::ALL
            .iter()
            .filter(|k| p.multi[row][k.index()] >= 0.5)
            .fold(ManipSet::EMPTY, |s, &k| s.with(k));
        Self {
            fake: p.binary[row] >= 0.5,
            kinds,
        }
    }
}

fn join_kinds(kinds: ManipSet) -> String {
    let names: Vec<&str> = kinds.iter().map(ManipKind::name).collect();
    match names.as_slice() {
        [] => String::new(),
        [one] => one.to_string(),
        [init @ .., last] => format!("{} and {last}", init.join(", ")),
    }
}

/// Offline answer rendered from the heads. The instruction does not change
/// the answer.
pub fn stub_response(h: HeadOutputs) -> String {
    match (h.fake, h.kinds.is_empty()) {
        (false, true) => "No. The image and text look authentic.".into(),
        (false, false) => format!(
            "No. The pair is judged authentic overall, though weak cues of {} manipulation were seen.",
            join_kinds(h.kinds)
        ),
        (true, true) => "Yes. The pair is manipulated, but no specific manipulation type stands out.".into(),
        (true, false) => format!("Yes. {} manipulation detected.", capitalize(&join_kinds(h.kinds))),
    }
}

fn capitalize(s: &str) -> String {
    let mut c = s.chars();
    c.next()
        .map_or_else(String::new, |f| f.to_uppercase().chain(c).collect())
}

#[derive(Serialize)]
struct ServiceRequest<'a> {
    template: &'a str,
    image_feature: String,
    width: usize,
    rows: usize,
}

#[derive(Deserialize)]
struct ServiceResponse {
    text: String,
}

/// Little-endian fp32 rows, base64-encoded.
pub fn encode_rows(t: &Tensor) -> String {
    let bytes: Vec<u8> = t.data().iter().flat_map(|&v| (v as f32).to_le_bytes()).collect();
    base64::engine::general_purpose::STANDARD.encode(bytes)
}

/// Where answers come from.
#[derive(Clone, Debug)]
pub enum Generator {
    Stub(HeadOutputs),
    Service { endpoint: String, timeout: Duration },
}

pub fn query_llm(gen: &Generator, record: &PromptRecord) -> Result<String, BridgeError> {
    match gen {
        Generator::Stub(h) => Ok(stub_response(*h)),
        Generator::Service { endpoint, timeout } => post(endpoint, *timeout, record),
    }
}

fn post(endpoint: &str, timeout: Duration, record: &PromptRecord) -> Result<String, BridgeError> {
    let (image_feature, width, rows) = match &record.features {
        FeatureBlock::Rows(t) => {
            let s = t.shape();
            (encode_rows(t), s[s.len() - 1], t.numel() / s[s.len() - 1].max(1))
        }
        FeatureBlock::Placeholder => (String::new(), 0, 0),
    };
    let body = ServiceRequest {
        template: &record.template,
        image_feature,
        width,
        rows,
    };
    let agent: ureq::Agent = ureq::Agent::config_builder()
        .timeout_global(Some(timeout))
        .http_status_as_error(false)
        .build()
        .into();
    let map_err = |e: ureq::Error| match e {
        ureq::Error::Timeout(_) => BridgeError::Timeout(timeout),
        ureq::Error::Io(io)
            if io.kind() == std::io::ErrorKind::TimedOut || io.kind() == std::io::ErrorKind::WouldBlock =>
        {
            BridgeError::Timeout(timeout)
        }
        other => BridgeError::Transport(other.to_string()),
    };
    let mut resp = agent.post(endpoint).send_json(&body).map_err(map_err)?;
    let status = resp.status().as_u16();
    if !(200..300).contains(&status) {
        return Err(BridgeError::Status(status));
    }
    let mut text = String::new();
    resp.body_mut()
        .as_reader()
        .read_to_string(&mut text)
        .map_err(|e| BridgeError::Malformed(e.to_string()))?;
    let parsed: ServiceResponse = serde_json::from_str(&text).map_err(|e| BridgeError::Malformed(e.to_string()))?;
    Ok(parsed.text)
}
