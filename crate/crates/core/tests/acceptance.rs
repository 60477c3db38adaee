//! End-to-end acceptance run: one pass/fail line per criterion.

use std::io::{Read, Write};
use std::net::TcpListener;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use manipdet::bridge::{
    build_prompt, query_llm, stub_response, BridgeError, FeatureBlock, Generator, HeadOutputs, BINARY_INSTRUCTION,
    TYPE_INSTRUCTION,
};
use manipdet::data::{generate_dataset, read_dataset, write_dataset, Dataset, GeneratorConfig, ManipKind, ManipSet};
use manipdet::heads::{Component, LossFlags};
use manipdet::metrics::{auc, average_precision, eer, multilabel_metrics};
use manipdet::mlgf::MaskMode;
use manipdet::model::{Batch, Model, ModelConfig};
use manipdet::tensor::{checkpoint, grad_check, Graph, ParamId, ParamStore, Result as TResult, Tensor, Var};
use manipdet::trainer::{evaluate, loss_ablation_grid, run_ablation, train, AblationResult, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

// ---------------------------------------------------------------- gradients

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.5..1.5))
}

/// `sum(y * w)` for a fixed random `w`, so every output coordinate matters.
fn wsum(g: &mut Graph, y: Var, w: &Tensor) -> TResult<Var> {
    let wv = g.constant(w.clone())?;
    let p = g.mul(y, wv)?;
    g.sum(p)
}

type Prim = Box<dyn Fn(&mut Graph, Var) -> TResult<Var>>;

/// Each primitive as a scalar function of one input, with the other operands
/// frozen at random values.
fn primitives(rng: &mut ChaCha8Rng) -> Vec<(&'static str, Tensor, Prim)> {
    let mut v: Vec<(&'static str, Tensor, Prim)> = Vec::new();
    let (a, b) = (random(rng, &[3, 4]), random(rng, &[3, 4]));
    let w = random(rng, &[3, 4]);
    let row = random(rng, &[4]);
    {
        let (b, w) = (b.clone(), w.clone());
        v.push((
            "add",
            a.clone(),
            Box::new(move |g, x| {
                let c = g.constant(b.clone())?;
                let y = g.add(x, c)?;
                wsum(g, y, &w)
            }),
        ));
    }
    {
        let w = w.clone();
        v.push((
            "add_broadcast",
            row,
            Box::new(move |g, x| {
                let c = g.constant(Tensor::from_fn(&[3, 4], |i| (i as f64 * 0.7).sin()))?;
                let y = g.add(c, x)?;
                wsum(g, y, &w)
            }),
        ));
    }
    {
        let (b, w) = (b.clone(), w.clone());
        v.push((
            "sub",
            a.clone(),
            Box::new(move |g, x| {
                let c = g.constant(b.clone())?;
                let y = g.sub(c, x)?;
                wsum(g, y, &w)
            }),
        ));
    }
    {
        let (b, w) = (b.clone(), w.clone());
        v.push((
            "mul",
            a.clone(),
            Box::new(move |g, x| {
                let c = g.constant(b.clone())?;
                let y = g.mul(x, c)?;
                wsum(g, y, &w)
            }),
        ));
    }
    {
        let w = w.clone();
        v.push((
            "mul_broadcast",
            Tensor::new(vec![1], vec![0.8]).unwrap(),
            Box::new(move |g, x| {
                let c = g.constant(Tensor::from_fn(&[3, 4, 1], |i| (i as f64).cos()))?;
                let y = g.mul(c, x)?;
                let y = g.reshape(y, &[3, 4])?;
                wsum(g, y, &w)
            }),
        ));
    }
    {
        let w = w.clone();
        v.push((
            "scale",
            a.clone(),
            Box::new(move |g, x| {
                let y = g.scale(x, -2.5)?;
                wsum(g, y, &w)
            }),
        ));
    }
    {
        let m = random(rng, &[4, 5]);
        let w5 = random(rng, &[3, 5]);
        v.push((
            "matmul_lhs",
            a.clone(),
            Box::new(move |g, x| {
                let c = g.constant(m.clone())?;
                let y = g.matmul(x, c)?;
                wsum(g, y, &w5)
            }),
        ));
    }
    {
        let m = random(rng, &[2, 3, 4]);
        let w5 = random(rng, &[2, 3, 5]);
        v.push((
            "matmul_rhs_batched",
            random(rng, &[2, 4, 5]),
            Box::new(move |g, x| {
                let c = g.constant(m.clone())?;
                let y = g.matmul(c, x)?;
                wsum(g, y, &w5)
            }),
        ));
    }
    {
        let wt = random(rng, &[4, 3]);
        v.push((
            "transpose",
            a.clone(),
            Box::new(move |g, x| {
                let y = g.transpose(x)?;
                wsum(g, y, &wt)
            }),
        ));
    }
    {
        let wr = random(rng, &[2, 6]);
        v.push((
            "reshape",
            a.clone(),
            Box::new(move |g, x| {
                let y = g.reshape(x, &[2, 6])?;
                wsum(g, y, &wr)
            }),
        ));
    }
    {
        let (b, wc) = (b.clone(), random(rng, &[3, 8]));
        v.push((
            "concat",
            a.clone(),
            Box::new(move |g, x| {
                let c = g.constant(b.clone())?;
                let y = g.concat(&[c, x], 1)?;
                wsum(g, y, &wc)
            }),
        ));
    }
    {
        let ws = random(rng, &[3, 2]);
        v.push((
            "slice",
            a.clone(),
            Box::new(move |g, x| {
                let y = g.slice(x, 1, 1, 2)?;
                wsum(g, y, &ws)
            }),
        ));
    }
    {
        let w = w.clone();
        v.push((
            "exp",
            a.clone(),
            Box::new(move |g, x| {
                let y = g.exp(x)?;
                wsum(g, y, &w)
            }),
        ));
    }
    {
        let w = w.clone();
        let pos = Tensor::from_fn(&[3, 4], |i| 0.3 + a.data()[i].abs());
        v.push((
            "log",
            pos,
            Box::new(move |g, x| {
                let y = g.log(x)?;
                wsum(g, y, &w)
            }),
        ));
    }
    for (name, op) in [
        ("gelu", 0),
        ("softplus", 1),
        ("softmax_lastdim", 2),
        ("l2_normalize", 3),
    ] {
        let w = w.clone();
        v.push((
            name,
            a.clone(),
            Box::new(move |g, x| {
                let y = match op {
                    0 => g.gelu(x)?,
                    1 => g.softplus(x)?,
                    2 => g.softmax_lastdim(x)?,
                    _ => g.l2_normalize(x)?,
                };
                wsum(g, y, &w)
            }),
        ));
    }
    v.push((
        "sum",
        a.clone(),
        Box::new(|g, x| {
            let s = g.sum(x)?;
            g.mul(s, s)
        }),
    ));
    v.push((
        "mean",
        a.clone(),
        Box::new(|g, x| {
            let s = g.mean(x)?;
            let e = g.exp(s)?;
            g.sum(e)
        }),
    ));
    {
        let w3 = random(rng, &[3]);
        v.push((
            "sum_lastdim",
            a.clone(),
            Box::new(move |g, x| {
                let y = g.sum_lastdim(x)?;
                let y = g.reshape(y, &[3])?;
                wsum(g, y, &w3)
            }),
        ));
    }
    {
        let (gamma, beta) = (random(rng, &[4]), random(rng, &[4]));
        let (w1, ga, be) = (w.clone(), gamma.clone(), beta.clone());
        v.push((
            "layernorm_x",
            a.clone(),
            Box::new(move |g, x| {
                let (gm, bt) = (g.constant(ga.clone())?, g.constant(be.clone())?);
                let y = g.layernorm(x, gm, bt)?;
                wsum(g, y, &w1)
            }),
        ));
        let (w2, xa, be) = (w.clone(), a.clone(), beta.clone());
        v.push((
            "layernorm_gamma",
            gamma.clone(),
            Box::new(move |g, gm| {
                let (x, bt) = (g.constant(xa.clone())?, g.constant(be.clone())?);
                let y = g.layernorm(x, gm, bt)?;
                wsum(g, y, &w2)
            }),
        ));
        let (w3, xa) = (w.clone(), a.clone());
        v.push((
            "layernorm_beta",
            beta,
            Box::new(move |g, bt| {
                let (x, gm) = (g.constant(xa.clone())?, g.constant(gamma.clone())?);
                let y = g.layernorm(x, gm, bt)?;
                wsum(g, y, &w3)
            }),
        ));
    }
    {
        let we = random(rng, &[2, 3, 4]);
        v.push((
            "embedding_lookup",
            random(rng, &[5, 4]),
            Box::new(move |g, t| {
                let y = g.embedding_lookup(t, &[0, 3, 3, 1, 4, 0], &[2, 3])?;
                wsum(g, y, &we)
            }),
        ));
    }
    {
        let w = w.clone();
        let mask = Tensor::from_fn(&[3, 4], |i| f64::from(i % 3 == 1));
        v.push((
            "masked_fill",
            a.clone(),
            Box::new(move |g, x| {
                let y = g.masked_fill(x, &mask, -7.0)?;
                let y = g.softmax_lastdim(y)?;
                wsum(g, y, &w)
            }),
        ));
    }
    v
}

fn small_config() -> ModelConfig {
    ModelConfig {
        dim: 8,
        heads: 2,
        encoder_blocks: 1,
        qformer_blocks: 2,
        ffn_hidden: 16,
        proj_dim: 4,
        ..ModelConfig::default()
    }
}

/// A batch of two authentic and two manipulated samples starting at `offset`.
fn mixed_batch(ds: &Dataset, cfg: &ModelConfig, offset: usize, with_contrast: bool) -> Batch {
    let prim = ds.primary_indices();
    let real: Vec<usize> = prim.iter().copied().filter(|&i| !ds.samples[i].is_fake()).collect();
    let fake: Vec<usize> = prim.iter().copied().filter(|&i| ds.samples[i].is_fake()).collect();
    let idx = [
        real[offset % real.len()],
        fake[offset % fake.len()],
        real[(offset + 1) % real.len()],
        fake[(offset + 2) % fake.len()],
    ];
    Batch::from_samples(ds, &ds.index_by_id(), &idx, cfg, with_contrast).unwrap()
}

fn loss_value(model: &Model, ps: &ParamStore, batch: &Batch, flags: &LossFlags) -> f64 {
    let mut g = Graph::new();
    let out = model.losses(&mut g, ps, batch, flags).unwrap();
    g.value(out.total).item()
}

/// Worst relative error of `samples` random parameter coordinates of the loss
/// under `flags`. Coordinates whose gradient is below `1e-6` in magnitude are
/// not sampled: there, central differences are dominated by rounding.
fn model_grad_error(
    model: &Model,
    ps: &mut ParamStore,
    batch: &Batch,
    flags: &LossFlags,
    samples: usize,
    rng: &mut ChaCha8Rng,
) -> (f64, usize) {
    let mut g = Graph::new();
    let out = model.losses(&mut g, ps, batch, flags).unwrap();
    let grads = g.backward(out.total).unwrap();
    let mut coords: Vec<(ParamId, usize, f64)> = Vec::new();
    for id in ps.ids().collect::<Vec<_>>() {
        if let Some(t) = grads.param(id) {
            for (j, &a) in t.data().iter().enumerate() {
                if a.abs() >= 1e-6 {
                    coords.push((id, j, a));
                }
            }
        }
    }
    let eps = 1e-5;
    let mut worst: f64 = 0.0;
    let take = samples.min(coords.len());
    for _ in 0..take {
        let (id, j, a) = coords[rng.gen_range(0..coords.len())];
        let x0 = ps.value(id).data()[j];
        ps.value_mut(id).data_mut()[j] = x0 + eps;
        let up = loss_value(model, ps, batch, flags);
        ps.value_mut(id).data_mut()[j] = x0 - eps;
        let down = loss_value(model, ps, batch, flags);
        ps.value_mut(id).data_mut()[j] = x0;
        let cd = (up - down) / (2.0 * eps);
        worst = worst.max((a - cd).abs() / a.abs().max(cd.abs()));
    }
    (worst, take)
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut prim_worst: f64 = 0.0;
    let mut prim_count = 0;
    for _point in 0..10 {
        for (name, x, f) in primitives(&mut rng) {
            let err = grad_check(&f, &x, 1e-6).map_err(|e| format!("{name}: {e}"))?;
            ensure(err < 1e-6, || format!("primitive {name}: relative error {err:.2e}"))?;
            prim_worst = prim_worst.max(err);
            prim_count += 1;
        }
    }

    let ds = generate_dataset(&GeneratorConfig::with_total(11, "gradcheck", 40)).map_err(|e| e.to_string())?;
    let cfg = small_config();
    let mut losses: Vec<(String, LossFlags)> = Component::ALL
        .iter()
        .map(|&c| (c.key().to_string(), LossFlags::from_components(&[c])))
        .collect();
    losses.push(("total".into(), LossFlags::all()));
    let mut comp_worst: f64 = 0.0;
    let mut comp_coords = 0;
    for point in 0..10u64 {
        let (model, mut ps) = Model::new(&cfg, 1000 + point).map_err(|e| e.to_string())?;
        let batch = mixed_batch(&ds, &cfg, point as usize * 3, true);
        ensure(model.contrastive_batch(&batch).is_some(), || {
            "batch without contrastive anchors".into()
        })?;
        for (name, flags) in &losses {
            let (err, n) = model_grad_error(&model, &mut ps, &batch, flags, 6, &mut rng);
            ensure(n > 0, || format!("{name}: no parameter receives gradient"))?;
            ensure(err < 1e-4, || {
                format!("loss {name} at point {point}: relative error {err:.2e}")
            })?;
            comp_worst = comp_worst.max(err);
            comp_coords += n;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    ensure(secs < 60.0, || format!("took {secs:.1} s"))?;
    Ok(format!(
        "{prim_count} primitive checks (worst {prim_worst:.1e}), {comp_coords} loss coordinates over 7 losses (worst {comp_worst:.1e}), {secs:.1} s"
    ))
}

// ---------------------------------------------------------------- metrics

fn oracle_auc(s: &[f64], l: &[bool]) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    for i in (0..s.len()).filter(|&i| l[i]) {
        for j in (0..s.len()).filter(|&j| !l[j]) {
            den += 1.0;
            num += if s[i] > s[j] {
                1.0
            } else if s[i] == s[j] {
                0.5
            } else {
                0.0
            };
        }
    }
    num / den
}

/// Precision at each positive, ranking by descending score with ties broken
/// by input position.
fn oracle_ap(s: &[f64], l: &[bool]) -> f64 {
    let ahead = |i: usize, j: usize| s[j] > s[i] || (s[j] == s[i] && j <= i);
    let pos: Vec<usize> = (0..s.len()).filter(|&i| l[i]).collect();
    pos.iter()
        .map(|&i| {
            let above: Vec<usize> = (0..s.len()).filter(|&j| ahead(i, j)).collect();
            above.iter().filter(|&&j| l[j]).count() as f64 / above.len() as f64
        })
        .sum::<f64>()
        / pos.len() as f64
}

fn rates_at(s: &[f64], l: &[bool], thr: f64) -> (f64, f64) {
    let pos = l.iter().filter(|&&x| x).count() as f64;
    let neg = l.len() as f64 - pos;
    let fp = s.iter().zip(l).filter(|(&x, &y)| x >= thr && !y).count() as f64;
    let fnn = s.iter().zip(l).filter(|(&x, &y)| x < thr && y).count() as f64;
    (fp / neg, fnn / pos)
}

fn random_instance(rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<bool>) {
    let n = rng.gen_range(2..=500);
    let coarse = rng.gen_bool(0.5);
    let p = rng.gen_range(0.05..0.95);
    let mut s: Vec<f64> = (0..n)
        .map(|_| {
            let x: f64 = rng.gen_range(0.0..1.0);
            if coarse {
                (x * 20.0).round() / 20.0
            } else {
                x
            }
        })
        .collect();
    let mut l: Vec<bool> = (0..n).map(|_| rng.gen_bool(p)).collect();
    l[0] = true;
    l[1] = false;
    // mild signal so curves are not all chance
    for (x, &y) in s.iter_mut().zip(&l) {
        if y && rng.gen_bool(0.3) {
            *x = (*x + 0.25).min(1.0);
        }
    }
    (s, l)
}

fn criterion_2() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        let (s, l) = random_instance(&mut rng);
        let d = (auc(&s, &l).map_err(|e| e.to_string())? - oracle_auc(&s, &l)).abs();
        ensure(d <= 1e-9, || format!("AUC off by {d:.2e} at n={}", s.len()))?;
        worst = worst.max(d);
    }
    for _ in 0..200 {
        let n = rng.gen_range(2..=500);
        let coarse = rng.gen_bool(0.5);
        let scores: Vec<[f64; 4]> = (0..n)
            .map(|_| {
                std::array::from_fn(|_| {
                    let x: f64 = rng.gen_range(0.0..1.0);
                    if coarse {
                        (x * 10.0).round() / 10.0
                    } else {
                        x
                    }
                })
            })
            .collect();
        let labels: Vec<[bool; 4]> = (0..n)
            .map(|_| std::array::from_fn(|k| rng.gen_bool(0.1 + 0.2 * k as f64)))
            .collect();
        let m = multilabel_metrics(&scores, &labels).map_err(|e| e.to_string())?;
        let aps: Vec<f64> = (0..4)
            .filter_map(|k| {
                let s: Vec<f64> = scores.iter().map(|r| r[k]).collect();
                let l: Vec<bool> = labels.iter().map(|r| r[k]).collect();
                l.iter().any(|&x| x).then(|| oracle_ap(&s, &l))
            })
            .collect();
        let want = (!aps.is_empty()).then(|| aps.iter().sum::<f64>() / aps.len() as f64);
        match (m.map, want) {
            (Some(a), Some(b)) => {
                let d = (a - b).abs();
                ensure(d <= 1e-9, || format!("mAP off by {d:.2e} at n={n}"))?;
                worst = worst.max(d);
            }
            (None, None) => {}
            other => return Err(format!("mAP presence mismatch {other:?}")),
        }
    }
    for _ in 0..200 {
        let (s, l) = random_instance(&mut rng);
        let n = s.len() as f64;
        let e = eer(&s, &l).map_err(|e| e.to_string())?;
        ensure((e.fpr - e.fnr).abs() <= 1.0 / n, || {
            format!("EER rates {} vs {}", e.fpr, e.fnr)
        })?;
        // the reported point lies on the ROC segment between its two
        // bracketing thresholds, counted from scratch
        let above = s
            .iter()
            .copied()
            .filter(|&x| x > e.threshold)
            .fold(f64::INFINITY, f64::min);
        let below = s
            .iter()
            .copied()
            .filter(|&x| x <= e.threshold)
            .fold(f64::NEG_INFINITY, f64::max);
        let hi = if above.is_finite() {
            rates_at(&s, &l, above)
        } else {
            (0.0, 1.0)
        };
        let lo = if below.is_finite() {
            rates_at(&s, &l, below)
        } else {
            (1.0, 0.0)
        };
        let within = |x: f64, a: f64, b: f64| x >= a.min(b) - 1e-12 && x <= a.max(b) + 1e-12;
        ensure(within(e.fpr, hi.0, lo.0) && within(e.fnr, hi.1, lo.1), || {
            format!("EER point ({}, {}) outside segment {hi:?}..{lo:?}", e.fpr, e.fnr)
        })?;
        let at = rates_at(&s, &l, e.threshold);
        ensure(at == lo || at == hi, || "threshold does not sit on the segment".into())?;
    }
    for k in 0..50 {
        let (s, l) = random_instance(&mut rng);
        let s: Vec<f64> = s.iter().map(|x| (x * 1000.0).round() / 1000.0).collect();
        let base = auc(&s, &l).map_err(|e| e.to_string())?;
        let t: Vec<f64> = s
            .iter()
            .map(|&x| match k % 3 {
                0 => x.exp(),
                1 => x * x * x + x,
                _ => (3.0 * x).atan() * 10.0 - 4.0,
            })
            .collect();
        let d = (auc(&t, &l).map_err(|e| e.to_string())? - base).abs();
        ensure(d <= 1e-12, || format!("monotone transform moved AUC by {d:.2e}"))?;
    }
    // spot check the AP oracle itself against a hand-computed value
    let ap = average_precision(&[0.9, 0.8, 0.7, 0.6], &[true, false, true, false]).map_err(|e| e.to_string())?;
    ensure((ap - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-15, || format!("AP {ap}"))?;
    let secs = start.elapsed().as_secs_f64();
    ensure(secs < 30.0, || format!("took {secs:.1} s"))?;
    Ok(format!(
        "200 AUC, 200 mAP, 200 EER, 50 monotone instances; worst oracle gap {worst:.1e}; {secs:.1} s"
    ))
}

// ---------------------------------------------------------------- learning

fn default_split(split: &str, total: usize) -> Dataset {
    generate_dataset(&GeneratorConfig::with_total(7, split, total)).expect("default dataset")
}

fn mean_auc(rs: &[AblationResult], row: &str) -> Option<f64> {
    let v: Vec<f64> = rs
        .iter()
        .filter(|r| r.row == row)
        .map(|r| r.report.auc)
        .collect::<Option<_>>()?;
    Some(v.iter().sum::<f64>() / v.len() as f64)
}

fn criteria_3_and_4() -> (Outcome, Outcome) {
    let train = default_split("train", 2000);
    let test = default_split("test", 500);
    let base = TrainConfig::default();
    let grid = loss_ablation_grid(false);
    let full = grid[3].clone();
    let no_streams = grid[1].clone();
    let in_batch = grid[2].clone();

    let start = Instant::now();
    let first = run_ablation(&base, std::slice::from_ref(&full), &[7], &train, &test, 1);
    let secs = start.elapsed().as_secs_f64();
    let c3 = match &first {
        Err(e) => Err(e.to_string()),
        Ok(rs) => {
            let r = &rs[0].report;
            let (a, m, f) = (r.auc.unwrap_or(0.0), r.map.unwrap_or(0.0), r.g_f1);
            let line = format!(
                "AUC {a:.4}, mAP {m:.4}, grounding F1 {f:.4}, {} epochs in {secs:.0} s",
                base.epochs
            );
            if a >= 0.90 && m >= 0.80 && f >= 0.70 && secs < 900.0 {
                Ok(line)
            } else {
                Err(line)
            }
        }
    };

    let c4 = (|| -> Outcome {
        let mut results = first.map_err(|e| e.to_string())?;
        results.extend(
            run_ablation(&base, std::slice::from_ref(&full), &[8, 9], &train, &test, 1).map_err(|e| e.to_string())?,
        );
        results.extend(
            run_ablation(
                &base,
                &[no_streams.clone(), in_batch.clone()],
                &[7, 8, 9],
                &train,
                &test,
                1,
            )
            .map_err(|e| e.to_string())?,
        );
        let f = mean_auc(&results, &full.name).ok_or("full run without AUC")?;
        let ns = mean_auc(&results, &no_streams.name).ok_or("ablated run without AUC")?;
        let ib = mean_auc(&results, &in_batch.name).ok_or("ablated run without AUC")?;
        let per_seed = |row: &str| {
            let v: Vec<String> = results
                .iter()
                .filter(|r| r.row == row)
                .map(|r| format!("{:.3}", r.report.auc.unwrap_or(f64::NAN)))
                .collect();
            v.join("/")
        };
        let summary = format!(
            "mean AUC over seeds 7-9: full {f:.4} ({}), no d,v {ns:.4} ({}), in-batch ITC {ib:.4} ({})",
            per_seed(&full.name),
            per_seed(&no_streams.name),
            per_seed(&in_batch.name)
        );
        let mut notes = Vec::new();
        let mut failed = false;
        for (name, other) in [("no d,v", ns), ("in-batch ITC", ib)] {
            if f < other {
                if other - f <= 0.005 {
                    notes.push(format!("TIE FLAGGED vs {name} ({:.4})", other - f));
                } else {
                    notes.push(format!("full trails {name} by {:.4}", other - f));
                    failed = true;
                }
            }
        }
        let line = if notes.is_empty() {
            summary
        } else {
            format!("{summary}; {}", notes.join("; "))
        };
        if failed {
            Err(line)
        } else {
            Ok(line)
        }
    })();
    (c3, c4)
}

// ---------------------------------------------------------------- masking

fn criterion_5() -> Outcome {
    let mut cfg = small_config();
    cfg.mask_mode = MaskMode::Unimodal;
    let (model, ps) = Model::new(&cfg, 5).map_err(|e| e.to_string())?;
    let ds = generate_dataset(&GeneratorConfig::with_total(12, "mask", 24)).map_err(|e| e.to_string())?;
    let batch = mixed_batch(&ds, &cfg, 0, false);
    let nq = model.qformer.num_queries;
    let mut g = Graph::new();
    let fw = model.forward(&mut g, &ps, &batch).map_err(|e| e.to_string())?;
    let mut checked = 0;
    for stream in [&fw.global, &fw.local] {
        for heads in &stream.self_attn {
            for &w in heads {
                let s = g.shape(w).to_vec();
                let n = s[1];
                let data = g.value(w).data();
                for b in 0..s[0] {
                    for r in 0..nq {
                        for c in nq..n {
                            let x = data[(b * n + r) * n + c];
                            ensure(x == 0.0, || format!("query {r} attends to text column {c} with {x}"))?;
                            checked += 1;
                        }
                    }
                }
            }
        }
    }

    // same image features, unrelated text: query outputs must not move
    let mut rng = ChaCha8Rng::seed_from_u64(55);
    let t = cfg.max_len;
    let image = random(&mut rng, &[2, cfg.num_patches() + 1, cfg.dim]);
    let run = |text: Tensor, valid: Tensor| -> TResult<Vec<f64>> {
        let mut g = Graph::new();
        let i = g.constant(image.clone())?;
        let x = g.constant(text)?;
        let out = model.qformer.forward(&mut g, &ps, i, x, &valid, MaskMode::Unimodal)?;
        Ok(g.value(out.queries).data().to_vec())
    };
    let full_valid = Tensor::full(&[2, t], 1.0);
    let short_valid = Tensor::from_fn(&[2, t], |i| f64::from(i % t < 5));
    let a = run(random(&mut rng, &[2, t, cfg.dim]), full_valid).map_err(|e| e.to_string())?;
    let b = run(random(&mut rng, &[2, t, cfg.dim]), short_valid).map_err(|e| e.to_string())?;
    ensure(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()), || {
        "query outputs changed with the text".into()
    })?;

    // end to end: swapping token sequences leaves both streams' queries intact
    let mut other = batch.clone();
    other.tokens.rotate_left(1);
    let mut g2 = Graph::new();
    let fw2 = model.forward(&mut g2, &ps, &other).map_err(|e| e.to_string())?;
    for (x, y) in [
        (fw.global.queries, fw2.global.queries),
        (fw.local.queries, fw2.local.queries),
    ] {
        ensure(g.value(x) == g2.value(y), || {
            "stream queries changed with the tokens".into()
        })?;
    }
    Ok(format!(
        "{checked} query-to-text weights exactly 0; outputs bit-identical under text replacement"
    ))
}

// ---------------------------------------------------------------- persistence

fn tiny_train_config(dir: &std::path::Path, train: &std::path::Path, test: &std::path::Path) -> TrainConfig {
    TrainConfig {
        epochs: 2,
        warmup_steps: 4,
        seed: 21,
        train_path: Some(train.to_path_buf()),
        test_path: Some(test.to_path_buf()),
        out_dir: Some(dir.to_path_buf()),
        model: small_config(),
        ..TrainConfig::default()
    }
}

fn criterion_6() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let p = |name: &str| dir.path().join(name);
    let train_ds = generate_dataset(&GeneratorConfig::with_total(3, "train", 48)).map_err(|e| e.to_string())?;
    let test_ds = generate_dataset(&GeneratorConfig::with_total(3, "test", 24)).map_err(|e| e.to_string())?;
    write_dataset(&train_ds, &p("train.json")).map_err(|e| e.to_string())?;
    write_dataset(&test_ds, &p("test.json")).map_err(|e| e.to_string())?;

    // dataset round trip
    let back = read_dataset(&p("train.json")).map_err(|e| e.to_string())?;
    ensure(back == train_ds, || "dataset changed on round trip".into())?;
    write_dataset(&back, &p("again.json")).map_err(|e| e.to_string())?;
    let same_file = |a: &str, b: &str| std::fs::read(p(a)).ok() == std::fs::read(p(b)).ok();
    ensure(
        same_file("train.json", "again.json") && same_file("train.bin", "again.bin"),
        || "dataset rewrite is not byte-identical".into(),
    )?;

    // two identical training runs
    let mut outs = Vec::new();
    for run in ["run_a", "run_b"] {
        let cfg = tiny_train_config(&p(run), &p("train.json"), &p("test.json"));
        outs.push(train(&cfg).map_err(|e| e.to_string())?);
    }
    let read = |path: &std::path::Path| std::fs::read(path).unwrap_or_default();
    ensure(read(&outs[0].checkpoint) == read(&outs[1].checkpoint), || {
        "checkpoints differ".into()
    })?;
    ensure(read(&outs[0].history) == read(&outs[1].history), || {
        "histories differ".into()
    })?;
    ensure(outs[0].entries == outs[1].entries, || "reports differ".into())?;

    // checkpoint round trip through a fresh model
    let cfg = tiny_train_config(&p("run_a"), &p("train.json"), &p("test.json"));
    let (model, mut ps) = Model::new(&cfg.model, 999).map_err(|e| e.to_string())?;
    checkpoint::load_into(&mut ps, &outs[0].checkpoint).map_err(|e| e.to_string())?;
    let direct = outs[0].entries.last().ok_or("no history")?.report.clone();
    let reloaded = evaluate(&model, &ps, &test_ds, cfg.batch_size).map_err(|e| e.to_string())?;
    ensure(
        serde_json::to_string(&direct).ok() == serde_json::to_string(&reloaded).ok(),
        || "reloaded checkpoint evaluates differently".into(),
    )?;
    checkpoint::save(&ps, &p("resaved.ckpt")).map_err(|e| e.to_string())?;
    ensure(read(&p("resaved.ckpt")) == read(&outs[0].checkpoint), || {
        "checkpoint re-save differs".into()
    })?;

    // corrupted checkpoints
    let good = read(&outs[0].checkpoint);
    let mut cases: Vec<(&str, Vec<u8>, u32)> = Vec::new();
    let mut bad_magic = good.clone();
    bad_magic[0] ^= 0xff;
    cases.push(("magic", bad_magic, 101));
    let mut bad_version = good.clone();
    bad_version[4..8].copy_from_slice(&99u32.to_le_bytes());
    cases.push(("version", bad_version, 102));
    cases.push(("truncated", good[..good.len() - 3].to_vec(), 103));
    let mut trailing = good.clone();
    trailing.extend_from_slice(&[0, 1, 2]);
    cases.push(("trailing", trailing, 104));
    for (what, bytes, code) in cases {
        let path = p(&format!("bad_{what}.ckpt"));
        std::fs::write(&path, bytes).map_err(|e| e.to_string())?;
        let (_, mut fresh) = Model::new(&cfg.model, 1).map_err(|e| e.to_string())?;
        match checkpoint::load_into(&mut fresh, &path) {
            Err(e) if e.code() == code => {}
            other => return Err(format!("checkpoint {what}: expected code {code}, got {other:?}")),
        }
    }
    let wider = ModelConfig {
        dim: 12,
        ..small_config()
    };
    let (_, mut wide_ps) = Model::new(&wider, 1).map_err(|e| e.to_string())?;
    match checkpoint::load_into(&mut wide_ps, &outs[0].checkpoint) {
        Err(e) if e.code() == 106 => {}
        other => return Err(format!("dimension mismatch: expected code 106, got {other:?}")),
    }

    // corrupted datasets
    let blob = read(&p("train.bin"));
    let manifest = String::from_utf8(read(&p("train.json"))).map_err(|e| e.to_string())?;
    let dataset_case = |name: &str, m: &str, b: &[u8], code: u32| -> Result<(), String> {
        std::fs::write(p(&format!("{name}.json")), m).map_err(|e| e.to_string())?;
        std::fs::write(p(&format!("{name}.bin")), b).map_err(|e| e.to_string())?;
        match read_dataset(&p(&format!("{name}.json"))) {
            Err(e) if e.code() == code => Ok(()),
            Err(e) => Err(format!("dataset {name}: expected code {code}, got {} ({e})", e.code())),
            Ok(_) => Err(format!("dataset {name}: accepted")),
        }
    };
    let mut flipped = blob.clone();
    flipped[100] ^= 0x01;
    dataset_case("flipped", &manifest, &flipped, 203)?;
    dataset_case("short_blob", &manifest, &blob[..blob.len() / 2], 202)?;
    dataset_case(
        "version",
        &manifest.replacen("\"version\":1", "\"version\":7", 1),
        &blob,
        201,
    )?;
    dataset_case("garbage", "{{{ not json\n", &blob, 204)?;
    let cut: String = manifest.lines().take(5).map(|l| format!("{l}\n")).collect();
    dataset_case("cut_manifest", &cut, &blob, 202)?;
    Ok("bit-identical checkpoints, histories and reports across runs; round trips exact; 11 corruptions rejected with their codes".into())
}

// ---------------------------------------------------------------- sharing

fn query_outputs(model: &Model, ps: &ParamStore, batch: &Batch) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut g = Graph::new();
    let fw = model.forward(&mut g, ps, batch).unwrap();
    let text_rows: Vec<f64> = fw.global.self_attn[0]
        .iter()
        .flat_map(|&w| {
            let n = g.shape(w)[1];
            let nq = model.qformer.num_queries;
            g.value(w)
                .data()
                .chunks(n)
                .enumerate()
                .filter(move |(r, _)| r % n >= nq)
                .flat_map(|(_, row)| row.to_vec())
                .collect::<Vec<_>>()
        })
        .collect();
    (
        g.value(fw.global.queries).data().to_vec(),
        g.value(fw.local.queries).data().to_vec(),
        text_rows,
    )
}

fn criterion_7() -> Outcome {
    let cfg = small_config();
    let (model, mut ps) = Model::new(&cfg, 8).map_err(|e| e.to_string())?;
    let ds = generate_dataset(&GeneratorConfig::with_total(13, "share", 24)).map_err(|e| e.to_string())?;
    let batch = mixed_batch(&ds, &cfg, 0, false);

    // a single set of query-transformer parameters serves both streams
    let names: Vec<String> = ps.ids().map(|id| ps.name(id).to_string()).collect();
    let qf: Vec<&String> = names.iter().filter(|n| n.starts_with("qformer.")).collect();
    let mut uniq = qf.clone();
    uniq.sort();
    uniq.dedup();
    ensure(uniq.len() == qf.len(), || {
        "duplicate query-transformer parameter names".into()
    })?;
    ensure(
        !names
            .iter()
            .any(|n| n.contains("text_self") || n.starts_with("qformer_local")),
        || "separate stream parameters exist".into(),
    )?;

    let (g0, l0, t0) = query_outputs(&model, &ps, &batch);
    let blk = &model.qformer.blocks[0];
    for (what, id) in [
        ("queries", model.qformer.queries),
        ("self-attention", blk.self_attn.params()[0]),
        ("cross-attention", blk.cross_attn.params()[0]),
    ] {
        let saved = ps.value(id).clone();
        ps.value_mut(id).data_mut().iter_mut().for_each(|x| *x += 0.05);
        let (g1, l1, t1) = query_outputs(&model, &ps, &batch);
        *ps.value_mut(id) = saved;
        ensure(g1 != g0 && l1 != l0, || {
            format!("{what} mutation not visible in both streams")
        })?;
        if what == "self-attention" {
            ensure(t1 != t0, || "text rows do not use the query self-attention".into())?;
        }
    }
    let (g2, l2, _) = query_outputs(&model, &ps, &batch);
    ensure(g2 == g0 && l2 == l0, || {
        "restoring parameters did not restore outputs".into()
    })?;

    // the local encoder only feeds the local stream
    let local_id = model.local.encoder_params()[0];
    ps.value_mut(local_id).data_mut().iter_mut().for_each(|x| *x += 0.05);
    let (g3, l3, _) = query_outputs(&model, &ps, &batch);
    ensure(g3 == g0 && l3 != l0, || {
        "local-encoder mutation leaked into the global stream".into()
    })?;
    Ok(format!(
        "{} shared query-transformer tensors; mutations visible in both streams and in the text rows",
        qf.len()
    ))
}

// ---------------------------------------------------------------- bridge

/// Serves one connection: reads the request, then runs `respond`.
fn one_shot_server(
    respond: impl FnOnce(&mut std::net::TcpStream, String) + Send + 'static,
) -> (String, std::thread::JoinHandle<()>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/generate", listener.local_addr().unwrap());
    let h = std::thread::spawn(move || {
        if let Ok((mut s, _)) = listener.accept() {
            s.set_read_timeout(Some(Duration::from_secs(5))).ok();
            let mut buf = Vec::new();
            let mut chunk = [0u8; 4096];
            loop {
                let n = s.read(&mut chunk).unwrap_or(0);
                if n == 0 {
                    break;
                }
                buf.extend_from_slice(&chunk[..n]);
                let text = String::from_utf8_lossy(&buf);
                if let Some(end) = text.find("\r\n\r\n") {
                    let len = text[..end]
                        .lines()
                        .find_map(|l| {
                            l.to_ascii_lowercase()
                                .strip_prefix("content-length:")
                                .map(|v| v.trim().parse::<usize>().unwrap_or(0))
                        })
                        .unwrap_or(0);
                    if buf.len() >= end + 4 + len {
                        break;
                    }
                }
            }
            let body = String::from_utf8_lossy(&buf)
                .split("\r\n\r\n")
                .nth(1)
                .unwrap_or("")
                .to_string();
            respond(&mut s, body);
        }
    });
    (url, h)
}

fn reply(s: &mut std::net::TcpStream, status: &str, body: &str) {
    let msg = format!(
        "HTTP/1.1 {status}\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
        body.len()
    );
    s.write_all(msg.as_bytes()).ok();
}

fn expected_stub(fake: bool, kinds: ManipSet) -> String {
    let names: Vec<&str> = ManipKind::ALL
        .iter()
        .filter(|k| kinds.contains(**k))
        .map(|k| match k {
            ManipKind::FS => "face swap",
            ManipKind::FA => "face attribute",
            ManipKind::TS => "text swap",
            ManipKind::TA => "text attribute",
        })
        .collect();
    let listed = match names.len() {
        0 => String::new(),
        1 => names[0].to_string(),
        k => format!("{} and {}", names[..k - 1].join(", "), names[k - 1]),
    };
    match (fake, names.is_empty()) {
        (false, true) => "No. The image and text look authentic.".into(),
        (false, false) => {
            format!("No. The pair is judged authentic overall, though weak cues of {listed} manipulation were seen.")
        }
        (true, true) => "Yes. The pair is manipulated, but no specific manipulation type stands out.".into(),
        (true, false) => {
            let mut c = listed.chars();
            let first = c.next().unwrap().to_uppercase().collect::<String>();
            format!("Yes. {first}{} manipulation detected.", c.as_str())
        }
    }
}

fn criterion_8() -> Outcome {
    let goldens = [
        (
            BINARY_INSTRUCTION,
            "###Human:(Img)(ImageFeature)(/Img)Is this image-text pair manipulated? ###Assistant:",
        ),
        (
            TYPE_INSTRUCTION,
            "###Human:(Img)(ImageFeature)(/Img)What type of manipulation is involved? ###Assistant:",
        ),
    ];
    for (instr, want) in goldens {
        let rec = build_prompt(FeatureBlock::Placeholder, instr).map_err(|e| e.to_string())?;
        ensure(rec.template == want, || format!("template {:?}", rec.template))?;
    }
    ensure(
        matches!(
            build_prompt(FeatureBlock::Placeholder, "  "),
            Err(BridgeError::EmptyInstruction)
        ),
        || "empty instruction accepted".into(),
    )?;

    let mut cases = 0;
    for fake in [false, true] {
        for bits in 0..16u8 {
            let kinds = ManipSet::from_bits(bits);
            let h = HeadOutputs { fake, kinds };
            let got = stub_response(h);
            let want = expected_stub(fake, kinds);
            ensure(got == want, || format!("stub {fake}/{bits:04b}: {got:?} != {want:?}"))?;
            let rec = build_prompt(FeatureBlock::Placeholder, TYPE_INSTRUCTION).map_err(|e| e.to_string())?;
            ensure(query_llm(&Generator::Stub(h), &rec).ok() == Some(want), || {
                "stub generator disagrees".into()
            })?;
            cases += 1;
        }
    }

    let rows = Tensor::from_fn(&[17, 6], |i| i as f64 * 0.01);
    let rec = build_prompt(FeatureBlock::Rows(rows), BINARY_INSTRUCTION).map_err(|e| e.to_string())?;
    let service = |url: &str, ms: u64| Generator::Service {
        endpoint: url.to_string(),
        timeout: Duration::from_millis(ms),
    };
    let mut faults = Vec::new();

    let (url, h) = one_shot_server(|s, body| {
        let v: serde_json::Value = serde_json::from_str(&body).unwrap_or_default();
        let ok =
            v["template"].as_str().is_some_and(|t| t.ends_with("###Assistant:")) && v["rows"] == 17 && v["width"] == 6;
        reply(
            s,
            "200 OK",
            if ok {
                r#"{"text":"Yes."}"#
            } else {
                r#"{"text":"bad request body"}"#
            },
        );
    });
    let got = query_llm(&service(&url, 5000), &rec);
    h.join().ok();
    ensure(matches!(&got, Ok(t) if t == "Yes."), || {
        format!("healthy service: {got:?}")
    })?;

    type Fault = Box<dyn FnOnce(&mut std::net::TcpStream, String) + Send>;
    let injected: Vec<(&str, u32, Fault)> = vec![
        (
            "timeout",
            301,
            Box::new(|_s, _b| std::thread::sleep(Duration::from_millis(1500))),
        ),
        (
            "status",
            302,
            Box::new(|s, _b| reply(s, "503 Service Unavailable", "{}")),
        ),
        ("malformed", 303, Box::new(|s, _b| reply(s, "200 OK", "{\"answer\": 3"))),
    ];
    for (what, code, respond) in injected {
        let (url, h) = one_shot_server(respond);
        let got = catch_unwind(AssertUnwindSafe(|| query_llm(&service(&url, 300), &rec)));
        h.join().ok();
        match got {
            Ok(Err(e)) if e.code() == code => faults.push(what),
            other => return Err(format!("{what}: expected code {code}, got {other:?}")),
        }
    }
    let closed = TcpListener::bind("127.0.0.1:0").map_err(|e| e.to_string())?;
    let url = format!("http://{}/", closed.local_addr().map_err(|e| e.to_string())?);
    drop(closed);
    match query_llm(&service(&url, 300), &rec) {
        Err(e) if e.code() == 304 => faults.push("refused"),
        other => return Err(format!("refused: expected code 304, got {other:?}")),
    }
    Ok(format!(
        "2 golden templates, {cases} stub cases, faults {faults:?} mapped to their codes"
    ))
}

// ---------------------------------------------------------------- driver

fn guarded(f: impl FnOnce() -> Outcome) -> Outcome {
    catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        Err(p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panicked".into()))
    })
}

#[test]
fn acceptance() {
    let mut results: Vec<(u32, &str, Outcome)> = vec![
        (1, "gradient correctness", guarded(criterion_1)),
        (2, "metric oracle equivalence", guarded(criterion_2)),
    ];
    let (c3, c4) = catch_unwind(criteria_3_and_4).unwrap_or_else(|_| (Err("panicked".into()), Err("panicked".into())));
    results.push((3, "desk-scale learning", c3));
    results.push((4, "ablation trend", c4));
    results.push((5, "mask leakage", guarded(criterion_5)));
    results.push((6, "determinism and persistence", guarded(criterion_6)));
    results.push((7, "query-transformer sharing", guarded(criterion_7)));
    results.push((8, "language-model bridge", guarded(criterion_8)));
    results.sort_by_key(|r| r.0);

    // written to the raw stream so the lines show even when output is captured
    let mut out = std::io::stderr().lock();
    let mut failed = Vec::new();
    for (n, name, r) in &results {
        let line = match r {
            Ok(d) => format!("criterion {n} ({name}): PASS: {d}"),
            Err(d) => {
                failed.push(*n);
                format!("criterion {n} ({name}): FAIL: {d}")
            }
        };
        writeln!(out, "{line}").ok();
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
