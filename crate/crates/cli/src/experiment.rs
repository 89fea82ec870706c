//! Training and length-generalization evaluation runs.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use rand::Rng;
use serde::Serialize;
use skam::mosaic::{save_checkpoint, AdamW, Batch, MosaicModel};
use skam::rng::seeded;
use skam::tasks::{exact_match, TaskSample, TaskSpec};

use crate::config::ExperimentConfig;

const DATA_STREAM: u64 = 0xba7c;
const EVAL_BATCH: usize = 64;

/// One line of `metrics.jsonl`.
#[derive(Debug, Clone, Serialize)]
pub struct MetricsLine {
    pub iter: u64,
    pub split: &'static str,
    pub multiplier: Option<f64>,
    pub loss: f64,
    pub acc: Option<f64>,
    pub lr: f64,
    pub elapsed_s: Option<f64>,
}

/// Final exact match of one training seed at every evaluation multiplier.
#[derive(Debug, Clone, Serialize)]
pub struct SeedResult {
    pub seed: u64,
    pub final_train_loss: f64,
    pub exact_match: Vec<(f64, f64)>,
    pub checkpoint: PathBuf,
}

pub fn batch_from(samples: &[TaskSample]) -> Result<Batch> {
    let seq_len = samples.first().context("empty batch")?.len();
    if samples.iter().any(|s| s.len() != seq_len) {
        bail!("samples in a batch must share one length");
    }
    Ok(Batch {
        tokens: samples.iter().flat_map(|s| s.input.iter().copied()).collect(),
        targets: samples.iter().flat_map(|s| s.target.iter().copied()).collect(),
        mask: samples.iter().flat_map(|s| s.mask.iter().copied()).collect(),
        seq_len,
    })
}

/// Teacher-forced exact match and mean masked loss over `samples`.
pub fn evaluate_samples(model: &MosaicModel<f32>, samples: &[TaskSample]) -> Result<(f64, f64)> {
    let mut predictions = Vec::with_capacity(samples.len());
    let mut loss_sum = 0.0;
    let mut masked = 0usize;
    for chunk in samples.chunks(EVAL_BATCH) {
        let batch = batch_from(chunk)?;
        let n = batch.mask.iter().filter(|&&m| m).count();
        if n > 0 {
            loss_sum += model.loss(&batch)? * n as f64;
            masked += n;
        }
        let pred = model.predict(&batch.tokens, batch.seq_len)?;
        predictions.extend(pred.chunks(batch.seq_len).map(|c| c.to_vec()));
    }
    let acc = exact_match(&predictions, samples)?;
    Ok((acc, if masked > 0 { loss_sum / masked as f64 } else { 0.0 }))
}

/// Held-out samples: indices `count..count + n`, never drawn for training.
pub fn held_out(spec: &TaskSpec, multiplier: f64, n: usize) -> Result<Vec<TaskSample>> {
    let s = spec.with_multiplier(multiplier);
    let start = spec.count as u64;
    (start..start + n as u64)
        .map(|i| s.sample(i).map_err(Into::into))
        .collect()
}

pub fn seed_dir(cfg: &ExperimentConfig, seed: u64) -> PathBuf {
    cfg.output_dir.join(format!("seed_{seed}"))
}

fn write_line<W: Write>(w: &mut W, line: &MetricsLine) -> Result<()> {
    writeln!(w, "{}", serde_json::to_string(line)?)?;
    Ok(())
}

/// Trains one seed, writing metrics and checkpoints under `seed_<seed>/`.
pub fn train_seed(cfg: &ExperimentConfig, seed: u64) -> Result<SeedResult> {
    let dir = seed_dir(cfg, seed);
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut metrics = BufWriter::new(File::create(dir.join("metrics.jsonl"))?);

    let mut mcfg = cfg.model.clone();
    mcfg.seed = seed;
    let mut model = MosaicModel::<f32>::new(mcfg.clone())?;
    let mut opt = AdamW::new(mcfg.optimizer.clone());
    let t = &cfg.training;
    let ckpt_every = t.checkpoint_every.unwrap_or(t.eval_every);
    let mut rng = seeded(seed, DATA_STREAM);
    let eval_sets = t
        .eval_multipliers
        .iter()
        .map(|&m| Ok((m, held_out(&cfg.task, m, t.eval_samples)?)))
        .collect::<Result<Vec<_>>>()?;

    let start = Instant::now();
    let elapsed = |s: &Instant| t.record_wall_clock.then(|| s.elapsed().as_secs_f64());
    let mut last_loss = f64::NAN;
    let mut final_acc = Vec::new();
    let mut checkpoint = dir.join("final.skam");
    for it in 0..t.iters {
        let samples = (0..t.batch_size)
            .map(|_| cfg.task.sample(rng.gen_range(0..cfg.task.count as u64)))
            .collect::<Result<Vec<_>, _>>()?;
        let (loss, lr) = model
            .train_step(&mut opt, &batch_from(&samples)?)
            .with_context(|| format!("seed {seed}, iteration {it}"))?;
        last_loss = loss;
        write_line(
            &mut metrics,
            &MetricsLine {
                iter: it,
                split: "train",
                multiplier: None,
                loss,
                acc: None,
                lr,
                elapsed_s: elapsed(&start),
            },
        )?;
        let done = it + 1;
        if done % t.eval_every == 0 || done == t.iters {
            final_acc.clear();
            for (m, set) in &eval_sets {
                let (acc, eloss) = evaluate_samples(&model, set)?;
                final_acc.push((*m, acc));
                write_line(
                    &mut metrics,
                    &MetricsLine {
                        iter: done,
                        split: "eval",
                        multiplier: Some(*m),
                        loss: eloss,
                        acc: Some(acc),
                        lr,
                        elapsed_s: elapsed(&start),
                    },
                )?;
            }
            log::info!(
                "seed {seed} iter {done}: loss {last_loss:.4} exact match {}",
                final_acc
                    .iter()
                    .map(|(m, a)| format!("{m}x={a:.3}"))
                    .collect::<Vec<_>>()
                    .join(" ")
            );
        }
        if done % ckpt_every == 0 && done != t.iters {
            save_checkpoint(&model, &dir.join(format!("ckpt_{done:06}.skam")))?;
        }
        if done == t.iters {
            checkpoint = dir.join("final.skam");
            save_checkpoint(&model, &checkpoint)?;
        }
    }
    metrics.flush()?;
    Ok(SeedResult {
        seed,
        final_train_loss: last_loss,
        exact_match: final_acc,
        checkpoint,
    })
}

/// Worker cap from `SKAM_THREADS`, defaulting to the available cores.
pub fn thread_cap() -> usize {
    std::env::var("SKAM_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// Trains every seed (in parallel up to `threads`) and writes `summary.csv`.
pub fn run_experiment(cfg: &ExperimentConfig, threads: usize) -> Result<Vec<SeedResult>> {
    fs::create_dir_all(&cfg.output_dir)?;
    fs::write(cfg.output_dir.join("config.json"), cfg.to_json())?;
    let mut results = Vec::with_capacity(cfg.training.seeds.len());
    for group in cfg.training.seeds.chunks(threads.max(1)) {
        let outcomes: Vec<Result<SeedResult>> = std::thread::scope(|s| {
            let handles: Vec<_> = group.iter().map(|&seed| s.spawn(move || train_seed(cfg, seed))).collect();
            handles
                .into_iter()
                .map(|h| h.join().unwrap_or_else(|_| Err(anyhow::anyhow!("training thread panicked"))))
                .collect()
        });
        for r in outcomes {
            results.push(r?);
        }
    }
    let table = summary_table(&results);
    fs::write(cfg.output_dir.join("summary.csv"), &table)?;
    Ok(results)
}

pub fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    match n {
        0 => f64::NAN,
        _ if n % 2 == 1 => v[n / 2],
        _ => 0.5 * (v[n / 2 - 1] + v[n / 2]),
    }
}

/// CSV `multiplier,<per-seed columns>,median,max` from per-seed results.
pub fn summary_table(results: &[SeedResult]) -> String {
    let labels: Vec<String> = results.iter().map(|r| format!("seed_{}", r.seed)).collect();
    let rows: Vec<(f64, Vec<f64>)> = match results.first() {
        None => Vec::new(),
        Some(first) => first
            .exact_match
            .iter()
            .enumerate()
            .map(|(i, (m, _))| (*m, results.iter().map(|r| r.exact_match[i].1).collect()))
            .collect(),
    };
    format_table(&labels, &rows)
}

pub fn format_table(labels: &[String], rows: &[(f64, Vec<f64>)]) -> String {
    let mut out = format!("multiplier,{},median,max\n", labels.join(","));
    for (m, accs) in rows {
        let cells: Vec<String> = accs.iter().map(|a| format!("{a:.4}")).collect();
        let max = accs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        out.push_str(&format!("{m},{},{:.4},{max:.4}\n", cells.join(","), median(accs)));
    }
    out
}

/// Exact match of each checkpoint at every multiplier of `spec`.
pub fn evaluate_checkpoints(
    models: &[(String, MosaicModel<f32>)],
    spec: &TaskSpec,
    multipliers: &[f64],
    samples: Option<usize>,
) -> Result<String> {
    let mut rows = Vec::new();
    for &m in multipliers {
        let s = spec.with_multiplier(m);
        let n = samples.unwrap_or(spec.count);
        let set = (0..n as u64).map(|i| s.sample(i)).collect::<Result<Vec<_>, _>>()?;
        let mut accs = Vec::new();
        for (_, model) in models {
            if model.config.vocab != spec.kind.vocab() {
                bail!(
                    "checkpoint vocabulary {} does not match the dataset's {}",
                    model.config.vocab,
                    spec.kind.vocab()
                );
            }
            accs.push(evaluate_samples(model, &set)?.0);
        }
        rows.push((m, accs));
    }
    let labels: Vec<String> = models.iter().map(|(l, _)| l.clone()).collect();
    Ok(format_table(&labels, &rows))
}

pub fn write_summary(path: &Path, results: &[SeedResult]) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(results)?)?;
    Ok(())
}
