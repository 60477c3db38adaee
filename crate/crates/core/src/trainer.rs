//! AdamW with warmup and cosine decay, the training loop, and evaluation.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{read_dataset, Dataset, DatasetIoError};
use crate::heads::{Component, LossFlags};
use crate::metrics::{EvalRecord, MetricsError, MetricsReport};
use crate::model::{Batch, ContrastMode, Model, ModelConfig};
use crate::tensor::checkpoint::{self, CheckpointError};
use crate::tensor::{Gradients, Graph, ParamId, ParamStore, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Dataset(#[from] DatasetIoError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

impl TrainError {
    /// True for failures caused by input files rather than the run itself.
    pub fn is_data_error(&self) -> bool {
        matches!(
            self,
            TrainError::Dataset(_) | TrainError::Checkpoint(_) | TrainError::Config(_)
        )
    }
}

type Result<T> = std::result::Result<T, TrainError>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub peak_lr: f64,
    pub min_lr: f64,
    pub warmup_steps: usize,
    pub betas: (f64, f64),
    pub eps: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub flags: LossFlags,
    pub train_path: Option<PathBuf>,
    pub test_path: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    /// Evaluate (and checkpoint) every this many epochs; 0 evaluates only at the end.
    pub eval_every: usize,
    /// Serializes all work on one thread. Runs are then bit-reproducible.
    pub deterministic: bool,
    pub freeze_local_encoder: bool,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 16,
            peak_lr: 2e-3,
            min_lr: 1e-5,
            warmup_steps: 200,
            betas: (0.9, 0.98),
            eps: 1e-8,
            weight_decay: 0.05,
            seed: 7,
            flags: LossFlags::all(),
            train_path: None,
            test_path: None,
            out_dir: None,
            eval_every: 1,
            deterministic: true,
            freeze_local_encoder: false,
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(TrainError::Config(m.into()));
        if !(self.min_lr > 0.0 && self.min_lr <= self.peak_lr) {
            return bad("need 0 < min_lr <= peak_lr");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(0.0..1.0).contains(&self.betas.0) || !(0.0..1.0).contains(&self.betas.1) {
            return bad("betas must lie in [0, 1)");
        }
        if self.weight_decay < 0.0 || self.eps <= 0.0 {
            return bad("weight_decay must be >= 0 and eps > 0");
        }
        if self.flags.components().is_empty() {
            return bad("at least one loss component must be enabled");
        }
        self.model.validate().map_err(TrainError::Config)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| TrainError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Learning rate at `step` of a run with `total_steps` steps: linear from 0 to
/// the peak over the warmup, then cosine down to `min_lr`, never below it
/// after warmup.
pub fn lr_at(step: usize, total_steps: usize, cfg: &TrainConfig) -> f64 {
    let w = cfg.warmup_steps;
    if step < w {
        return cfg.peak_lr * step as f64 / w as f64;
    }
    let span = total_steps.saturating_sub(1).saturating_sub(w);
    if span == 0 {
        return if step == w { cfg.peak_lr } else { cfg.min_lr };
    }
    let t = ((step - w) as f64 / span as f64).min(1.0);
    let lr = cfg.min_lr + 0.5 * (cfg.peak_lr - cfg.min_lr) * (1.0 + (std::f64::consts::PI * t).cos());
    lr.max(cfg.min_lr)
}

/// AdamW moments, indexed by parameter.
#[derive(Clone, Debug)]
pub struct OptState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
    /// Steps dropped for non-finite gradients.
    pub skipped: u64,
}

impl OptState {
    pub fn new(ps: &ParamStore) -> Self {
        let zeros = || ps.ids().map(|id| Tensor::zeros(ps.value(id).shape())).collect();
        Self {
            m: zeros(),
            v: zeros(),
            step: 0,
            skipped: 0,
        }
    }
}

/// One decoupled-weight-decay Adam update of every trainable parameter.
/// Missing gradients count as zero. Returns false, leaving everything but the
/// skip counter untouched, when any gradient is non-finite.
pub fn adamw_step(ps: &mut ParamStore, grads: &Gradients, state: &mut OptState, lr: f64, cfg: &TrainConfig) -> bool {
    if grads.params().iter().any(|(_, g)| !g.is_finite()) {
        state.skipped += 1;
        log::warn!("non-finite gradient, step skipped ({} so far)", state.skipped);
        return false;
    }
    state.step += 1;
    let (b1, b2) = cfg.betas;
    let c1 = 1.0 - b1.powi(state.step as i32);
    let c2 = 1.0 - b2.powi(state.step as i32);
    let ids: Vec<ParamId> = ps.ids().collect();
    for id in ids {
        if !ps.is_trainable(id) {
            continue;
        }
        let k = id.index();
        let grad = grads.param(id);
        let m = state.m[k].data_mut();
        let v = state.v[k].data_mut();
        let p = ps.value_mut(id).data_mut();
        for i in 0..p.len() {
            let g = grad.map_or(0.0, |t| t.data()[i]);
            m[i] = b1 * m[i] + (1.0 - b1) * g;
            v[i] = b2 * v[i] + (1.0 - b2) * g * g;
            p[i] -= lr * cfg.weight_decay * p[i];
            p[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + cfg.eps);
        }
    }
    true
}

/// One line of the training history.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub epoch: usize,
    pub step: usize,
    pub train_loss: f64,
    pub components: Vec<(Component, f64)>,
    #[serde(flatten)]
    pub report: MetricsReport,
}

pub struct TrainResult {
    pub model: Model,
    pub params: ParamStore,
    pub history: Vec<HistoryEntry>,
    /// Mean total training loss of each epoch.
    pub epoch_losses: Vec<f64>,
    pub opt: OptState,
}

pub fn steps_per_epoch(train: &Dataset, batch_size: usize) -> usize {
    train.primary_indices().len().div_ceil(batch_size)
}

/// Trains on in-memory data; evaluates on `test` at the configured cadence.
/// With `out_dir` set, checkpoints go to `<out_dir>/model.ckpt` at each
/// evaluation.
pub fn train_on(cfg: &TrainConfig, train: &Dataset, test: Option<&Dataset>) -> Result<TrainResult> {
    cfg.validate()?;
    let (model, mut ps) = Model::new(&cfg.model, cfg.seed).map_err(TrainError::Config)?;
    if cfg.freeze_local_encoder {
        for id in model.local.encoder_params() {
            ps.set_trainable(id, false);
        }
    }
    let lookup = train.index_by_id();
    let mut order = train.primary_indices();
    if order.is_empty() {
        return Err(TrainError::Config("training set has no primary samples".into()));
    }
    let per_epoch = order.len().div_ceil(cfg.batch_size);
    let total = per_epoch * cfg.epochs;
    let mut opt = OptState::new(&ps);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x0074_7261_696e);
    let mut history = Vec::new();
    let mut epoch_losses = Vec::new();
    let mut step = 0;
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut comp_sum = vec![0.0; Component::ALL.len()];
        for chunk in order.chunks(cfg.batch_size) {
            let batch = Batch::from_samples(train, &lookup, chunk, &cfg.model, cfg.flags.itc)?;
            let mut g = Graph::new();
            let out = model.losses(&mut g, &ps, &batch, &cfg.flags)?;
            loss_sum += g.value(out.total).item();
            for (c, v) in &out.components {
                comp_sum[Component::ALL.iter().position(|x| x == c).unwrap_or(0)] += g.value(*v).item();
            }
            let grads = g.backward(out.total)?;
            adamw_step(&mut ps, &grads, &mut opt, lr_at(step, total, cfg), cfg);
            step += 1;
        }
        let mean_loss = loss_sum / per_epoch as f64;
        epoch_losses.push(mean_loss);
        log::info!("epoch {epoch}: loss {mean_loss:.4}");
        let due = if cfg.eval_every == 0 {
            epoch == cfg.epochs
        } else {
            epoch % cfg.eval_every == 0 || epoch == cfg.epochs
        };
        if let (true, Some(test)) = (due, test) {
            let report = evaluate(&model, &ps, test, cfg.batch_size)?;
            history.push(HistoryEntry {
                epoch,
                step,
                train_loss: mean_loss,
                components: Component::ALL
                    .iter()
                    .zip(&comp_sum)
                    .filter(|(c, _)| cfg.flags.enabled(**c))
                    .map(|(c, s)| (*c, s / per_epoch as f64))
                    .collect(),
                report,
            });
            if let Some(dir) = &cfg.out_dir {
                fs::create_dir_all(dir)?;
                checkpoint::save(&ps, &dir.join("model.ckpt"))?;
            }
        }
    }
    Ok(TrainResult {
        model,
        params: ps,
        history,
        epoch_losses,
        opt,
    })
}

/// Paths written by [`train`].
#[derive(Clone, Debug)]
pub struct TrainOutput {
    pub checkpoint: PathBuf,
    pub history: PathBuf,
    pub config: PathBuf,
    pub entries: Vec<HistoryEntry>,
}

/// Reads the datasets named in `cfg`, trains, and writes `model.ckpt`,
/// `history.jsonl` and `config.toml` into `out_dir`.
pub fn train(cfg: &TrainConfig) -> Result<TrainOutput> {
    let need = |p: &Option<PathBuf>, what: &str| p.clone().ok_or_else(|| TrainError::Config(format!("{what} not set")));
    let train_path = need(&cfg.train_path, "train_path")?;
    let out = need(&cfg.out_dir, "out_dir")?;
    let train_ds = read_dataset(&train_path)?;
    let test_ds = cfg.test_path.as_deref().map(read_dataset).transpose()?;
    let res = train_on(cfg, &train_ds, Some(test_ds.as_ref().unwrap_or(&train_ds)))?;
    fs::create_dir_all(&out)?;
    let ckpt = out.join("model.ckpt");
    checkpoint::save(&res.params, &ckpt)?;
    let hist = out.join("history.jsonl");
    let mut f = fs::File::create(&hist)?;
    for e in &res.history {
        let line = serde_json::to_string(e).map_err(|e| TrainError::Config(e.to_string()))?;
        writeln!(f, "{line}")?;
    }
    let conf = out.join("config.toml");
    fs::write(
        &conf,
        toml::to_string(cfg).map_err(|e| TrainError::Config(e.to_string()))?,
    )?;
    Ok(TrainOutput {
        checkpoint: ckpt,
        history: hist,
        config: conf,
        entries: res.history,
    })
}

/// Runs the model over the primary samples of `ds` without touching its
/// parameters.
pub fn collect_predictions(model: &Model, ps: &ParamStore, ds: &Dataset, batch_size: usize) -> Result<EvalRecord> {
    let lookup = ds.index_by_id();
    let mut rec = EvalRecord::default();
    for chunk in ds.primary_indices().chunks(batch_size.max(1)) {
        let batch = Batch::from_samples(ds, &lookup, chunk, &model.cfg, false)?;
        let p = model.predict(ps, &batch)?;
        for (r, &i) in chunk.iter().enumerate() {
            let s = &ds.samples[i];
            rec.binary_labels.push(s.label_binary == 1);
            rec.multi_labels.push(s.label_multi.to_multi_hot().map(|v| v == 1.0));
            let mut gl: Vec<bool> = s.grounding_mask.iter().map(|&m| m == 1).collect();
            gl.resize(model.cfg.max_len, false);
            rec.grounding_labels.push(gl);
            rec.binary_scores.push(p.binary[r]);
            rec.multi_scores.push(p.multi[r]);
            rec.grounding_scores.push(p.grounding[r].clone());
            rec.valid.push(p.valid[r].clone());
        }
    }
    Ok(rec)
}

pub fn evaluate(model: &Model, ps: &ParamStore, ds: &Dataset, batch_size: usize) -> Result<MetricsReport> {
    Ok(collect_predictions(model, ps, ds, batch_size)?.report()?)
}

/// Builds a model for `cfg`, loads `ckpt` into it, and evaluates on `ds`.
pub fn evaluate_checkpoint(cfg: &ModelConfig, ckpt: &Path, ds: &Dataset) -> Result<MetricsReport> {
    let (model, mut ps) = Model::new(cfg, 0).map_err(TrainError::Config)?;
    checkpoint::load_into(&mut ps, ckpt)?;
    evaluate(&model, &ps, ds, 64)
}

/// One configuration of the loss ablation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub flags: LossFlags,
    pub contrast: ContrastMode,
}

/// The four loss configurations: the three detection losses alone, plus the
/// counterpart-aware contrastive loss, plus the stream losses, plus both.
/// Where the counterpart-aware contrastive loss is off, plain in-batch
/// contrast takes its place, unless `drop_itc` removes it entirely.
pub fn loss_ablation_grid(drop_itc: bool) -> Vec<AblationRow> {
    [(false, false), (true, false), (false, true), (true, true)]
        .into_iter()
        .map(|(fca, streams)| {
            let mut flags = LossFlags::none();
            for c in [Component::Blc, Component::Mlc, Component::Tmg] {
                flags.set(c, true);
            }
            flags.set(Component::Itc, fca || !drop_itc);
            flags.set(Component::Local, streams);
            flags.set(Component::Global, streams);
            let itc = match (fca, drop_itc) {
                (true, _) => "fca",
                (false, false) => "in-batch",
                (false, true) => "none",
            };
            AblationRow {
                name: format!("itc={itc} d,v={}", if streams { "on" } else { "off" }),
                flags,
                contrast: if fca {
                    ContrastMode::Counterpart
                } else {
                    ContrastMode::InBatch
                },
            }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationResult {
    pub row: String,
    pub seed: u64,
    pub flags: LossFlags,
    pub contrast: ContrastMode,
    #[serde(flatten)]
    pub report: MetricsReport,
}

/// Trains every `(row, seed)` pair of the grid and evaluates on `test`.
/// Runs are independent; up to `jobs` of them proceed at once. Results come
/// back in grid order whatever the number of workers.
pub fn run_ablation(
    base: &TrainConfig,
    rows: &[AblationRow],
    seeds: &[u64],
    train: &Dataset,
    test: &Dataset,
    jobs: usize,
) -> Result<Vec<AblationResult>> {
    let tasks: Vec<(&AblationRow, u64)> = rows.iter().flat_map(|r| seeds.iter().map(move |&s| (r, s))).collect();
    let run = |(row, seed): (&AblationRow, u64)| -> Result<AblationResult> {
        let mut cfg = base.clone();
        cfg.flags = row.flags;
        cfg.model.contrast = row.contrast;
        cfg.seed = seed;
        cfg.eval_every = 0;
        cfg.out_dir = None;
        let res = train_on(&cfg, train, None)?;
        let report = evaluate(&res.model, &res.params, test, cfg.batch_size)?;
        log::info!("{} seed {seed}: auc {:?}", row.name, report.auc);
        Ok(AblationResult {
            row: row.name.clone(),
            seed,
            flags: row.flags,
            contrast: row.contrast,
            report,
        })
    };
    let jobs = jobs.clamp(1, tasks.len().max(1));
    if jobs == 1 {
        return tasks.into_iter().map(run).collect();
    }
    let next = std::sync::atomic::AtomicUsize::new(0);
    let slots: Vec<std::sync::Mutex<Option<Result<AblationResult>>>> =
        tasks.iter().map(|_| std::sync::Mutex::new(None)).collect();
    std::thread::scope(|s| {
        for _ in 0..jobs {
            s.spawn(|| loop {
                let i = next.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
                let Some(&task) = tasks.get(i) else { break };
                *slots[i].lock().expect("worker panicked") = Some(run(task));
            });
        }
    });
    slots
        .into_iter()
        .map(|m| m.into_inner().expect("worker panicked").expect("every task ran"))
        .collect()
}

/// Trains only the local encoder and its probe on face crops, as a
/// standalone real/fake classifier. Returns the probe's accuracy on `test`.
pub fn train_local_probe(
    model: &Model,
    ps: &mut ParamStore,
    train: &Dataset,
    test: &Dataset,
    epochs: usize,
    lr: f64,
    seed: u64,
) -> Result<f64> {
    let cfg = TrainConfig {
        weight_decay: 0.0,
        ..TrainConfig::default()
    };
    let crops = |ds: &Dataset| -> Result<Vec<(Vec<f64>, f64)>> {
        ds.primary()
            .map(|s| {
                let c = crate::data::crop_face(&s.image, s.width, s.height, &s.face_box, model.cfg.local_res)
                    .map_err(|e| TrainError::Config(e.to_string()))?;
                Ok((c, f64::from(s.label_multi.has_image())))
            })
            .collect()
    };
    let mut tr = crops(train)?;
    let te = crops(test)?;
    let mut opt = OptState::new(ps);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..epochs {
        tr.shuffle(&mut rng);
        for chunk in tr.chunks(32) {
            let x: Vec<&[f64]> = chunk.iter().map(|c| c.0.as_slice()).collect();
            let y: Vec<f64> = chunk.iter().map(|c| c.1).collect();
            let mut g = Graph::new();
            let loss = model.probe_loss(&mut g, ps, &x, &y)?;
            let grads = g.backward(loss)?;
            adamw_step(ps, &grads, &mut opt, lr, &cfg);
        }
    }
    let mut hits = 0;
    for chunk in te.chunks(64) {
        let x: Vec<&[f64]> = chunk.iter().map(|c| c.0.as_slice()).collect();
        let mut g = Graph::new();
        let e_d = model.local.forward(&mut g, ps, &x)?;
        let z = model.local.probe_logit(&mut g, ps, e_d)?;
        hits += g
            .value(z)
            .data()
            .iter()
            .zip(chunk)
            .filter(|(&z, c)| (z >= 0.0) == (c.1 == 1.0))
            .count();
    }
    Ok(hits as f64 / te.len().max(1) as f64)
}
