//! `skam`: sparse attention as kernel regression, from the command line.
//!
//! Exit codes: 0 success, 1 runtime failure (or a failed verification),
//! 2 bad flags or invalid config, 3 missing or corrupt checkpoint.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use serde_json::json;
use thiserror::Error;
use skam::harness::{run_suite, HarnessConfig, Suite, DEFAULT_GAMMAS};
use skam::mosaic::load_checkpoint;
use skam::tasks::{read_dataset, write_dataset, TaskKind, TaskSpec};
use skam::transforms::{Transform, TransformSpec};
use skam_cli::bench::{bench_transform, MIN_REPS};
use skam_cli::config::{ConfigError, ExperimentConfig};
use skam_cli::experiment::{evaluate_checkpoints, run_experiment, summary_table, thread_cap, write_summary};

#[derive(Debug, Parser)]
#[command(name = "skam", version, about = "Sparse attention as compact-kernel regression")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, clap::Args)]
struct TransformArgs {
    /// softmax, sparsemax, entmax, norm_relu, relumax, topk_uniform, topk_softmax
    #[arg(long)]
    kind: String,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    b: Option<f64>,
    #[arg(long, default_value_t = 1.0)]
    gamma: f64,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Apply one transform to a score vector and print the weights as JSON.
    Transform {
        #[command(flatten)]
        transform: TransformArgs,
        /// Comma-separated scores.
        #[arg(long, allow_hyphen_values = true)]
        scores: String,
    },
    /// Run randomized equivalence suites; exits 0 iff every check passes.
    Verify {
        /// prop1, gauss, normrelu, topk, relumax or all
        #[arg(long)]
        suite: String,
        #[arg(long, default_value_t = 200)]
        trials: usize,
        /// Maximum number of stored keys.
        #[arg(long, default_value_t = 64)]
        n: usize,
        /// Maximum key dimension.
        #[arg(long, default_value_t = 16)]
        d: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "2,1.5,1.3333333333")]
        alphas: String,
        #[arg(long, default_value = "0.5,1,2")]
        gammas: String,
    },
    /// Write a JSONL task dataset.
    Gen {
        /// mqmtar, reverse or sort
        #[arg(long)]
        task: String,
        #[arg(long)]
        base_len: usize,
        #[arg(long, default_value_t = 1.0)]
        multiplier: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        count: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train every seed of an experiment config.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Exact match of checkpoints on a dataset, regenerated at each multiplier.
    Eval {
        /// Checkpoint path(s), comma-separated or repeated.
        #[arg(long, required = true, value_delimiter = ',')]
        ckpt: Vec<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "1")]
        multipliers: String,
        /// Samples per multiplier (defaults to the dataset's count).
        #[arg(long)]
        samples: Option<usize>,
    },
    /// Median time of each transform over at least 30 repetitions.
    Bench {
        #[arg(long, default_value = "softmax,sparsemax,entmax")]
        kinds: String,
        #[arg(long, default_value = "16,64,256,1024")]
        sizes: String,
        #[arg(long, default_value_t = MIN_REPS)]
        reps: usize,
        #[arg(long, default_value_t = 1.5)]
        alpha: f64,
        #[arg(long, default_value_t = 8)]
        k: usize,
        #[arg(long, default_value_t = 0.1)]
        b: f64,
        #[arg(long, default_value_t = 1.0)]
        gamma: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

/// Bad flag values; reported with exit code 2.
#[derive(Debug, Error)]
#[error("{0}")]
struct Usage(String);

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

/// Missing or unreadable checkpoint; reported with exit code 3.
#[derive(Debug, Error)]
#[error("{0}")]
struct BadCheckpoint(String);

fn parse_list<T: std::str::FromStr>(flag: &str, s: &str) -> Result<Vec<T>> {
    s.split(',')
        .filter(|p| !p.trim().is_empty())
        .map(|p| {
            p.trim()
                .parse()
                .map_err(|_| usage(format!("--{flag}: cannot parse {p:?}")))
        })
        .collect()
}

fn transform_from(kind: &str, alpha: Option<f64>, k: Option<usize>, b: Option<f64>) -> Result<Transform> {
    let need_k = || k.ok_or_else(|| usage(format!("--kind {kind} needs --k")));
    Ok(match kind {
        "softmax" => Transform::Softmax,
        "sparsemax" => Transform::Sparsemax,
        "entmax" => Transform::Entmax {
            alpha: alpha.ok_or_else(|| usage("--kind entmax needs --alpha"))?,
        },
        "norm_relu" | "normrelu" => Transform::NormRelu { b: b.unwrap_or(0.0) },
        "relumax" => Transform::Relumax {
            b: b.ok_or_else(|| usage("--kind relumax needs --b"))?,
        },
        "topk_uniform" => Transform::TopkUniform { k: need_k()? },
        "topk_softmax" => Transform::TopkSoftmax { k: need_k()? },
        other => return Err(usage(format!("unknown transform kind {other:?}"))),
    })
}

fn cmd_transform(args: TransformArgs, scores: &str) -> Result<()> {
    let z: Vec<f64> = parse_list("scores", scores)?;
    let spec = TransformSpec::new(transform_from(&args.kind, args.alpha, args.k, args.b)?, args.gamma);
    spec.validate().map_err(|e| usage(e.to_string()))?;
    let w = spec.apply(&z).map_err(|e| usage(e.to_string()))?;
    println!(
        "{}",
        json!({
            "weights": w.weights,
            "tau": w.threshold,
            "support": w.support,
            "degenerate": w.degenerate,
        })
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_verify(suite: &str, trials: usize, n: usize, d: usize, seed: u64, alphas: &str, gammas: &str) -> Result<bool> {
    let suites = if suite == "all" {
        vec![Suite::Prop1, Suite::Gauss, Suite::Normrelu, Suite::Topk, Suite::Relumax]
    } else {
        vec![Suite::parse(suite).ok_or_else(|| usage(format!("unknown suite {suite:?}")))?]
    };
    let alphas: Vec<f64> = parse_list("alphas", alphas)?;
    let mut gammas: Vec<f64> = parse_list("gammas", gammas)?;
    if gammas.is_empty() {
        gammas = DEFAULT_GAMMAS.to_vec();
    }
    let cfg = HarnessConfig {
        trials,
        max_keys: n,
        max_dim: d,
        seed,
    };
    let mut all_pass = true;
    for s in suites {
        for r in run_suite(s, &cfg, &alphas, &gammas)? {
            all_pass &= r.pass;
            println!("{}", serde_json::to_string(&r)?);
        }
    }
    eprintln!("{}", if all_pass { "all checks passed" } else { "some checks FAILED" });
    Ok(all_pass)
}

fn cmd_gen(task: &str, base_len: usize, multiplier: f64, seed: u64, count: usize, out: &PathBuf) -> Result<()> {
    let kind = TaskKind::parse(task).ok_or_else(|| usage(format!("unknown task {task:?}")))?;
    let spec = TaskSpec::new(kind, base_len, seed, count).with_multiplier(multiplier);
    spec.content_len().map_err(|e| usage(e.to_string()))?;
    let file = File::create(out).with_context(|| format!("creating {}", out.display()))?;
    write_dataset(BufWriter::new(file), &spec)?;
    eprintln!("wrote {count} samples to {}", out.display());
    Ok(())
}

fn cmd_train(config: &PathBuf) -> Result<()> {
    let cfg = ExperimentConfig::load(config)?;
    let threads = thread_cap();
    log::info!(
        "training {} seed(s) on {} thread(s) into {}",
        cfg.training.seeds.len(),
        threads.min(cfg.training.seeds.len()),
        cfg.output_dir.display()
    );
    let results = run_experiment(&cfg, threads)?;
    write_summary(&cfg.output_dir.join("summary.json"), &results)?;
    print!("{}", summary_table(&results));
    Ok(())
}

fn cmd_eval(ckpts: &[PathBuf], data: &PathBuf, multipliers: &str, samples: Option<usize>) -> Result<()> {
    let mut models = Vec::new();
    for path in ckpts {
        let model = load_checkpoint(path)
            .map_err(|e| anyhow::Error::new(BadCheckpoint(format!("{}: {e}", path.display()))))?;
        models.push((format!("seed_{}", model.config.seed), model));
    }
    let file = File::open(data).with_context(|| format!("opening {}", data.display()))?;
    let (header, _) = read_dataset(BufReader::new(file))?;
    let ms: Vec<f64> = parse_list("multipliers", multipliers)?;
    let spec = header.spec();
    for &m in &ms {
        spec.with_multiplier(m).content_len().map_err(|e| usage(e.to_string()))?;
    }
    let table = evaluate_checkpoints(&models, &spec, &ms, samples)?;
    let mut out = std::io::stdout().lock();
    out.write_all(table.as_bytes())?;
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_bench(kinds: &str, sizes: &str, reps: usize, alpha: f64, k: usize, b: f64, gamma: f64, seed: u64) -> Result<()> {
    let sizes: Vec<usize> = parse_list("sizes", sizes)?;
    if sizes.contains(&0) {
        return Err(usage("--sizes must be positive"));
    }
    println!("kind,n,median_ns");
    for kind in kinds.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        let spec = TransformSpec::new(transform_from(kind, Some(alpha), Some(k), Some(b))?, gamma);
        spec.validate().map_err(|e| usage(e.to_string()))?;
        for &n in &sizes {
            let row = bench_transform(kind, &spec, n, reps, seed)?;
            println!("{},{},{}", row.kind, row.n, row.median_ns);
        }
    }
    Ok(())
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Transform { transform, scores } => cmd_transform(transform, &scores).map(|_| true),
        Command::Verify {
            suite,
            trials,
            n,
            d,
            seed,
            alphas,
            gammas,
        } => cmd_verify(&suite, trials, n, d, seed, &alphas, &gammas),
        Command::Gen {
            task,
            base_len,
            multiplier,
            seed,
            count,
            out,
        } => cmd_gen(&task, base_len, multiplier, seed, count, &out).map(|_| true),
        Command::Train { config } => cmd_train(&config).map(|_| true),
        Command::Eval {
            ckpt,
            data,
            multipliers,
            samples,
        } => cmd_eval(&ckpt, &data, &multipliers, samples).map(|_| true),
        Command::Bench {
            kinds,
            sizes,
            reps,
            alpha,
            k,
            b,
            gamma,
            seed,
        } => cmd_bench(&kinds, &sizes, reps, alpha, k, b, gamma, seed).map(|_| true),
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    if e.downcast_ref::<Usage>().is_some() {
        return 2;
    }
    if let Some(c) = e.downcast_ref::<ConfigError>() {
        return if matches!(c, ConfigError::Read { .. }) { 1 } else { 2 };
    }
    if e.downcast_ref::<BadCheckpoint>().is_some() {
        return 3;
    }
    1
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .target(env_logger::Target::Stderr)
        .init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
