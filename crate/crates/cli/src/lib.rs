//! Command-line front end.
//!
//! Exit codes: 0 success, 1 usage error, 2 bad input data (dataset,
//! checkpoint, config or predictions file), 3 runtime failure (training,
//! inference, or the text-generation service).

use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Duration;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use manipdet::bridge::{
    build_prompt, finetune, query_llm, Bridge, BridgeError, FeatureBlock, Generator, HeadOutputs, BINARY_INSTRUCTION,
};
use manipdet::data::{generate_dataset, read_dataset, write_dataset, CategoryCounts, Dataset, GeneratorConfig};
use manipdet::heads::Component;
use manipdet::metrics::{EvalRecord, MetricsReport};
use manipdet::mlgf::MaskMode;
use manipdet::model::{Batch, ContrastMode, Model};
use manipdet::tensor::checkpoint;
use manipdet::tensor::{Graph, ParamStore, Tensor, Var};
use manipdet::trainer::{evaluate, loss_ablation_grid, run_ablation, train, AblationResult, TrainConfig, TrainError};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Data(String),
    Runtime(String),
}

impl CliError {
    pub fn code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Data(_) => EXIT_DATA,
            CliError::Runtime(_) => EXIT_RUNTIME,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Data(m) | CliError::Runtime(m) => m,
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        if e.is_data_error() {
            CliError::Data(e.to_string())
        } else {
            CliError::Runtime(e.to_string())
        }
    }
}

impl From<BridgeError> for CliError {
    fn from(e: BridgeError) -> Self {
        match e {
            BridgeError::Checkpoint(_) => CliError::Data(e.to_string()),
            BridgeError::EmptyInstruction => CliError::Usage(e.to_string()),
            _ => CliError::Runtime(format!("{e} (code {})", e.code())),
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn data_err(e: impl std::fmt::Display) -> CliError {
    CliError::Data(e.to_string())
}

fn runtime_err(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

#[derive(Parser, Debug)]
#[command(
    name = "manipdet",
    version,
    about = "Image-text manipulation detection on synthetic data"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// Seed for everything random in this command.
    #[arg(long)]
    seed: Option<u64>,
    /// TOML config file (generator config for `generate`, training config otherwise).
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset (manifest plus pixel blob).
    Generate(GenerateArgs),
    /// Train a model; writes checkpoint, history and the resolved config.
    Train(TrainArgs),
    /// Print a metrics report as JSON.
    Eval(EvalArgs),
    /// Train and evaluate the loss-ablation grid.
    Ablate(AblateArgs),
    /// Dump attention maps as graymaps plus JSON.
    ExportAttention(ExportArgs),
    /// Ask a text generator about one sample.
    Explain(ExplainArgs),
}

#[derive(Args, Debug)]
struct GenerateArgs {
    #[command(flatten)]
    common: Common,
    /// Manifest path; the blob is written next to it.
    #[arg(long)]
    out: PathBuf,
    /// Number of primary samples, split proportionally across categories.
    #[arg(long)]
    count: Option<usize>,
    /// Split name; samples of different splits are independent.
    #[arg(long)]
    split: Option<String>,
}

#[derive(Args, Debug, Clone)]
struct TrainOverrides {
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Contrastive negatives: counterpart or in-batch.
    #[arg(long)]
    contrast: Option<String>,
    /// Query/text self-attention mask: bidirectional or unimodal.
    #[arg(long)]
    mask_mode: Option<String>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    overrides: TrainOverrides,
    #[arg(long)]
    train: Option<PathBuf>,
    #[arg(long)]
    test: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Comma-separated loss components to switch off (itc, d, v, blc, mlc, tmg).
    #[arg(long, value_delimiter = ',')]
    disable: Vec<String>,
    #[arg(long)]
    freeze_local_encoder: bool,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, conflicts_with = "predictions", requires = "data")]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    /// Score stored predictions (JSON) instead of running a model.
    #[arg(long)]
    predictions: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct AblateArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    overrides: TrainOverrides,
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    test: PathBuf,
    /// Directory for `ablation.jsonl`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Seeds per configuration, counting up from --seed.
    #[arg(long, default_value_t = 3)]
    seeds: usize,
    /// Concurrent training runs.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// Rows without the counterpart-aware loss get no contrastive loss at all
    /// instead of plain in-batch contrast.
    #[arg(long)]
    drop_itc: bool,
}

#[derive(Args, Debug)]
struct ModelInput {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
}

#[derive(Args, Debug)]
struct ExportArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    input: ModelInput,
    #[arg(long)]
    out: PathBuf,
    /// Sample ids to export; defaults to the first --count primaries.
    #[arg(long, value_delimiter = ',')]
    ids: Vec<String>,
    #[arg(long, default_value_t = 1)]
    count: usize,
}

#[derive(Args, Debug)]
struct ExplainArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    input: ModelInput,
    /// Sample id; defaults to the first primary sample.
    #[arg(long)]
    id: Option<String>,
    #[arg(long, default_value = BINARY_INSTRUCTION)]
    instruction: String,
    /// Text-generation service URL; without it the offline stub answers.
    #[arg(long)]
    endpoint: Option<String>,
    #[arg(long, default_value_t = 5000)]
    timeout_ms: u64,
    /// Width of the projected features; defaults to the model width.
    #[arg(long)]
    width: Option<usize>,
    /// Saved projection weights.
    #[arg(long)]
    bridge: Option<PathBuf>,
    /// Tune the projection on --data for this many epochs first.
    #[arg(long, default_value_t = 0)]
    finetune_epochs: usize,
    /// Where to save the projection after tuning.
    #[arg(long)]
    save_bridge: Option<PathBuf>,
}

/// Parses `argv` (without the program name) and runs the command, writing
/// results to `out` and diagnostics to `err`.
pub fn run_with(argv: &[String], out: &mut dyn Write, err: &mut dyn Write) -> i32 {
    let cli = match Cli::try_parse_from(std::iter::once("manipdet".to_string()).chain(argv.iter().cloned())) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let text = e.render().to_string();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = write!(out, "{text}");
                    EXIT_OK
                }
                _ => {
                    let _ = write!(err, "{text}");
                    EXIT_USAGE
                }
            };
        }
    };
    let res = match cli.command {
        Command::Generate(a) => cmd_generate(a, out),
        Command::Train(a) => cmd_train(a, out),
        Command::Eval(a) => cmd_eval(a, out),
        Command::Ablate(a) => cmd_ablate(a, out),
        Command::ExportAttention(a) => cmd_export(a, out),
        Command::Explain(a) => cmd_explain(a, out),
    };
    match res {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(err, "error: {}", e.message());
            e.code()
        }
    }
}

pub fn run(argv: &[String]) -> i32 {
    run_with(argv, &mut std::io::stdout(), &mut std::io::stderr())
}

fn print_json<T: Serialize>(out: &mut dyn Write, v: &T) -> Result<()> {
    let s = serde_json::to_string_pretty(v).map_err(runtime_err)?;
    writeln!(out, "{s}").map_err(runtime_err)
}

fn read_toml<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| data_err(format!("{}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| data_err(format!("{}: {e}", path.display())))
}

fn load_dataset(path: &Path) -> Result<Dataset> {
    read_dataset(path).map_err(|e| data_err(format!("{}: {e} (code {})", path.display(), e.code())))
}

fn cmd_generate(a: GenerateArgs, out: &mut dyn Write) -> Result<()> {
    let mut cfg = match &a.common.config {
        Some(p) => read_toml::<GeneratorConfig>(p)?,
        None => GeneratorConfig::default(),
    };
    if let Some(s) = a.common.seed {
        cfg.seed = s;
    }
    if let Some(n) = a.count {
        cfg.counts = CategoryCounts::proportional(n);
    }
    if let Some(s) = a.split {
        cfg.split = s;
    }
    let ds = generate_dataset(&cfg).map_err(|e| CliError::Usage(e.to_string()))?;
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(runtime_err)?;
    }
    write_dataset(&ds, &a.out).map_err(runtime_err)?;
    #[derive(Serialize)]
    struct Summary<'a> {
        manifest: &'a Path,
        primary: usize,
        fake: usize,
        sources: usize,
    }
    let primary = ds.primary().count();
    print_json(
        out,
        &Summary {
            manifest: &a.out,
            primary,
            fake: ds.primary().filter(|s| s.is_fake()).count(),
            sources: ds.len() - primary,
        },
    )
}

fn train_config(common: &Common, o: &TrainOverrides) -> Result<TrainConfig> {
    let mut cfg = match &common.config {
        Some(p) => read_toml::<TrainConfig>(p)?,
        None => TrainConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(e) = o.epochs {
        cfg.epochs = e;
    }
    if let Some(b) = o.batch_size {
        cfg.batch_size = b;
    }
    if let Some(lr) = o.lr {
        cfg.peak_lr = lr;
        cfg.min_lr = cfg.min_lr.min(lr);
    }
    if let Some(c) = &o.contrast {
        cfg.model.contrast = match c.as_str() {
            "counterpart" => ContrastMode::Counterpart,
            "in-batch" | "in_batch" => ContrastMode::InBatch,
            other => return Err(CliError::Usage(format!("unknown contrast mode {other:?}"))),
        };
    }
    if let Some(m) = &o.mask_mode {
        cfg.model.mask_mode = m.parse::<MaskMode>().map_err(CliError::Usage)?;
    }
    Ok(cfg)
}

fn cmd_train(a: TrainArgs, out: &mut dyn Write) -> Result<()> {
    let mut cfg = train_config(&a.common, &a.overrides)?;
    for name in &a.disable {
        let c = Component::ALL
            .into_iter()
            .find(|c| c.key() == name.as_str())
            .ok_or_else(|| CliError::Usage(format!("unknown loss component {name:?}")))?;
        cfg.flags.set(c, false);
    }
    if a.freeze_local_encoder {
        cfg.freeze_local_encoder = true;
    }
    if let Some(p) = a.train {
        cfg.train_path = Some(p);
    }
    if let Some(p) = a.test {
        cfg.test_path = Some(p);
    }
    if let Some(p) = a.out {
        cfg.out_dir = Some(p);
    }
    if cfg.train_path.is_none() || cfg.out_dir.is_none() {
        return Err(CliError::Usage(
            "train needs --train and --out (or both in --config)".into(),
        ));
    }
    cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let res = train(&cfg)?;
    #[derive(Serialize)]
    struct Summary<'a> {
        checkpoint: &'a Path,
        history: &'a Path,
        config: &'a Path,
        report: Option<&'a MetricsReport>,
    }
    print_json(
        out,
        &Summary {
            checkpoint: &res.checkpoint,
            history: &res.history,
            config: &res.config,
            report: res.entries.last().map(|e| &e.report),
        },
    )
}

/// Training config for a checkpoint: `--config`, else `config.toml` next to
/// the checkpoint, else defaults.
fn config_for_checkpoint(common: &Common, ckpt: &Path) -> Result<TrainConfig> {
    if let Some(p) = &common.config {
        return read_toml(p);
    }
    let sibling = ckpt.with_file_name("config.toml");
    if sibling.exists() {
        read_toml(&sibling)
    } else {
        Ok(TrainConfig::default())
    }
}

fn load_model(common: &Common, ckpt: &Path) -> Result<(Model, ParamStore)> {
    let cfg = config_for_checkpoint(common, ckpt)?;
    let (model, mut ps) = Model::new(&cfg.model, 0).map_err(data_err)?;
    checkpoint::load_into(&mut ps, ckpt)
        .map_err(|e| data_err(format!("{}: {e} (code {})", ckpt.display(), e.code())))?;
    Ok((model, ps))
}

fn cmd_eval(a: EvalArgs, out: &mut dyn Write) -> Result<()> {
    let report = if let Some(p) = &a.predictions {
        let text = fs::read_to_string(p).map_err(|e| data_err(format!("{}: {e}", p.display())))?;
        let rec: EvalRecord = serde_json::from_str(&text).map_err(|e| data_err(format!("{}: {e}", p.display())))?;
        rec.report().map_err(data_err)?
    } else {
        let (Some(ckpt), Some(data)) = (&a.checkpoint, &a.data) else {
            return Err(CliError::Usage(
                "eval needs --checkpoint and --data, or --predictions".into(),
            ));
        };
        let (model, ps) = load_model(&a.common, ckpt)?;
        let ds = load_dataset(data)?;
        evaluate(&model, &ps, &ds, 64)?
    };
    print_json(out, &report)
}

fn pct(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |x| format!("{:.2}", 100.0 * x))
}

fn mean_of(rs: &[&AblationResult], f: impl Fn(&MetricsReport) -> Option<f64>) -> Option<f64> {
    let v: Vec<f64> = rs.iter().filter_map(|r| f(&r.report)).collect();
    (v.len() == rs.len() && !v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Seed-averaged summary, one line per configuration, values in percent.
pub fn ablation_table(results: &[AblationResult]) -> String {
    let mut names: Vec<&str> = Vec::new();
    for r in results {
        if !names.contains(&r.row.as_str()) {
            names.push(&r.row);
        }
    }
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:<4} {:<4} {:<4} {:<4} {:<4} {:<9} | {:>6} {:>6} {:>6} | {:>6} {:>6} {:>6} | {:>6} {:>6} {:>6}",
        "BLC", "MLC", "TMG", "d", "v", "ITC", "AUC", "EER", "ACC", "mAP", "CF1", "OF1", "P", "R", "F1"
    );
    for name in names {
        let rs: Vec<&AblationResult> = results.iter().filter(|r| r.row == name).collect();
        let f = rs[0].flags;
        let mark = |b: bool| if b { "x" } else { "" };
        let itc = match (f.itc, rs[0].contrast) {
            (false, _) => "",
            (true, ContrastMode::Counterpart) => "fca",
            (true, ContrastMode::InBatch) => "in-batch",
        };
        let _ = writeln!(
            s,
            "{:<4} {:<4} {:<4} {:<4} {:<4} {:<9} | {:>6} {:>6} {:>6} | {:>6} {:>6} {:>6} | {:>6} {:>6} {:>6}",
            mark(f.blc),
            mark(f.mlc),
            mark(f.tmg),
            mark(f.d),
            mark(f.v),
            itc,
            pct(mean_of(&rs, |r| r.auc)),
            pct(mean_of(&rs, |r| r.eer)),
            pct(mean_of(&rs, |r| Some(r.acc))),
            pct(mean_of(&rs, |r| r.map)),
            pct(mean_of(&rs, |r| r.cf1)),
            pct(mean_of(&rs, |r| Some(r.of1))),
            pct(mean_of(&rs, |r| Some(r.g_precision))),
            pct(mean_of(&rs, |r| Some(r.g_recall))),
            pct(mean_of(&rs, |r| Some(r.g_f1))),
        );
    }
    s
}

fn cmd_ablate(a: AblateArgs, out: &mut dyn Write) -> Result<()> {
    let base = train_config(&a.common, &a.overrides)?;
    base.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    if a.seeds == 0 {
        return Err(CliError::Usage("--seeds must be at least 1".into()));
    }
    let train_ds = load_dataset(&a.train)?;
    let test_ds = load_dataset(&a.test)?;
    let seeds: Vec<u64> = (0..a.seeds as u64).map(|k| base.seed + k).collect();
    let rows = loss_ablation_grid(a.drop_itc);
    let results = run_ablation(&base, &rows, &seeds, &train_ds, &test_ds, a.jobs)?;
    if let Some(dir) = &a.out {
        fs::create_dir_all(dir).map_err(runtime_err)?;
        let mut text = String::new();
        for r in &results {
            text.push_str(&serde_json::to_string(r).map_err(runtime_err)?);
            text.push('\n');
        }
        fs::write(dir.join("ablation.jsonl"), text).map_err(runtime_err)?;
    }
    write!(out, "{}", ablation_table(&results)).map_err(runtime_err)
}

/// 8-bit binary graymap with each row scaled by its own maximum.
pub fn graymap(rows: usize, cols: usize, data: &[f64]) -> Vec<u8> {
    let mut buf = format!("P5\n{cols} {rows}\n255\n").into_bytes();
    for r in 0..rows {
        let row = &data[r * cols..(r + 1) * cols];
        let max = row.iter().cloned().fold(0.0f64, f64::max);
        buf.extend(row.iter().map(|&v| {
            if max > 0.0 {
                (255.0 * v / max).round().clamp(0.0, 255.0) as u8
            } else {
                0
            }
        }));
    }
    buf
}

#[derive(Serialize)]
struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

#[derive(Serialize)]
struct IndexEntry {
    id: String,
    name: String,
    rows: usize,
    cols: usize,
    pgm: String,
    json: String,
}

fn batch_row(g: &Graph, v: Var, b: usize) -> Matrix {
    let s = g.shape(v);
    let (rows, cols) = (s[s.len() - 2], s[s.len() - 1]);
    Matrix {
        rows,
        cols,
        data: g.value(v).data()[b * rows * cols..(b + 1) * rows * cols].to_vec(),
    }
}

fn select_samples(ds: &Dataset, ids: &[String], count: usize) -> Result<Vec<usize>> {
    if ids.is_empty() {
        return Ok(ds.primary_indices().into_iter().take(count).collect());
    }
    let lookup = ds.index_by_id();
    ids.iter()
        .map(|id| {
            lookup
                .get(id.as_str())
                .copied()
                .ok_or_else(|| CliError::Usage(format!("no sample {id:?} in dataset")))
        })
        .collect()
}

fn cmd_export(a: ExportArgs, out: &mut dyn Write) -> Result<()> {
    let (model, ps) = load_model(&a.common, &a.input.checkpoint)?;
    let ds = load_dataset(&a.input.data)?;
    let idx = select_samples(&ds, &a.ids, a.count)?;
    fs::create_dir_all(&a.out).map_err(runtime_err)?;
    let mut index = Vec::new();
    if !idx.is_empty() {
        let lookup = ds.index_by_id();
        let batch = Batch::from_samples(&ds, &lookup, &idx, &model.cfg, false).map_err(runtime_err)?;
        let mut g = Graph::new();
        let fw = model.forward(&mut g, &ps, &batch).map_err(runtime_err)?;
        let mut named: Vec<(String, Var)> = Vec::new();
        let mut push_stack = |prefix: &str, stack: &[Vec<Var>]| {
            for (bi, heads) in stack.iter().enumerate() {
                for (hi, &w) in heads.iter().enumerate() {
                    named.push((format!("{prefix}.b{bi}.h{hi}"), w));
                }
            }
        };
        push_stack("image.self", &fw.image_attn);
        push_stack("text.self", &fw.text_attn);
        push_stack("global.self", &fw.global.self_attn);
        push_stack("global.cross", &fw.global.cross_attn);
        push_stack("local.self", &fw.local.self_attn);
        push_stack("local.cross", &fw.local.cross_attn);
        named.push(("fusion".into(), fw.fuse_weights));
        for (b, &i) in idx.iter().enumerate() {
            let id = &ds.samples[i].id;
            let mut sidecar = std::collections::BTreeMap::new();
            let json_name = format!("{id}.json");
            for (name, v) in &named {
                let m = batch_row(&g, *v, b);
                let pgm_name = format!("{id}.{name}.pgm");
                fs::write(a.out.join(&pgm_name), graymap(m.rows, m.cols, &m.data)).map_err(runtime_err)?;
                index.push(IndexEntry {
                    id: id.clone(),
                    name: name.clone(),
                    rows: m.rows,
                    cols: m.cols,
                    pgm: pgm_name,
                    json: json_name.clone(),
                });
                sidecar.insert(name.clone(), m);
            }
            let text = serde_json::to_string(&sidecar).map_err(runtime_err)?;
            fs::write(a.out.join(&json_name), text).map_err(runtime_err)?;
        }
    }
    let text = serde_json::to_string_pretty(&index).map_err(runtime_err)?;
    fs::write(a.out.join("index.json"), text).map_err(runtime_err)?;
    #[derive(Serialize)]
    struct Summary<'a> {
        index: PathBuf,
        samples: usize,
        maps: usize,
        out: &'a Path,
    }
    print_json(
        out,
        &Summary {
            index: a.out.join("index.json"),
            samples: idx.len(),
            maps: index.len(),
            out: &a.out,
        },
    )
}

fn cmd_explain(a: ExplainArgs, out: &mut dyn Write) -> Result<()> {
    use rand::SeedableRng;
    let (model, mut ps) = load_model(&a.common, &a.input.checkpoint)?;
    let ds = load_dataset(&a.input.data)?;
    let ids: Vec<String> = a.id.iter().cloned().collect();
    let idx = select_samples(&ds, &ids, 1)?;
    let Some(&i) = idx.first() else {
        return Err(CliError::Data("dataset has no samples".into()));
    };
    let width = a.width.unwrap_or(model.cfg.dim);
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(a.common.seed.unwrap_or(0));
    let bridge = Bridge::new(&mut ps, model.cfg.dim, width, width == model.cfg.dim, &mut rng)
        .map_err(|e| CliError::Usage(e.to_string()))?;
    if let Some(p) = &a.bridge {
        bridge.load(&mut ps, p)?;
    }
    if a.finetune_epochs > 0 {
        finetune(&model, &bridge, &mut ps, &ds, a.finetune_epochs, 1e-3).map_err(runtime_err)?;
    }
    if let Some(p) = &a.save_bridge {
        bridge.save(&ps, p)?;
    }
    let lookup = ds.index_by_id();
    let batch = Batch::from_samples(&ds, &lookup, &[i], &model.cfg, false).map_err(runtime_err)?;
    let mut g = Graph::new();
    let fw = model.forward(&mut g, &ps, &batch).map_err(runtime_err)?;
    let projected = bridge.project(&mut g, &ps, fw.f).map_err(runtime_err)?;
    let preds = model.read_predictions(&g, &fw);
    let heads = HeadOutputs::from_predictions(&preds, 0);
    let (generator, features, mode) = match &a.endpoint {
        Some(url) => {
            let nq = g.shape(projected)[1];
            let rows = Tensor::new(vec![nq, width], g.value(projected).data().to_vec()).map_err(runtime_err)?;
            (
                Generator::Service {
                    endpoint: url.clone(),
                    timeout: Duration::from_millis(a.timeout_ms),
                },
                FeatureBlock::Rows(rows),
                "service",
            )
        }
        None => (Generator::Stub(heads), FeatureBlock::Placeholder, "stub"),
    };
    let record = build_prompt(features, &a.instruction)?;
    let response = query_llm(&generator, &record)?;
    #[derive(Serialize)]
    struct Explained<'a> {
        id: &'a str,
        mode: &'a str,
        instruction: &'a str,
        template: &'a str,
        response: String,
        fake_score: f64,
        kinds: Vec<&'static str>,
    }
    print_json(
        out,
        &Explained {
            id: &ds.samples[i].id,
            mode,
            instruction: &record.instruction,
            template: &record.template,
            response,
            fake_score: preds.binary[0],
            kinds: heads.kinds.iter().map(|k| k.name()).collect(),
        },
    )
}
