//! Single entry point over the library: train a model, evaluate a
//! checkpoint, compile it into an execution plan, run a plan on a tensor
//! file, time it, and emit cost reports.
//!
//! Every subcommand writes machine-readable JSON lines to stdout. Failures
//! print one `{"error": ...}` line to stderr and exit nonzero. The
//! environment variable `FLGC_SEED` overrides the seed in a model
//! configuration; an explicit `--seed` flag overrides both.

mod tensor_file;

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::error::ErrorKind;
use clap::{Parser, Subcommand};
use serde_json::json;

use flgc_core::analyze::{model_costs, plan_costs, LayerCost, Report};
use flgc_core::bench::{bench_plan, bench_plan_ops, BenchOptions};
use flgc_core::checkpoint;
use flgc_core::data::{load_mnist, Split};
use flgc_core::exec::{run_plan, ExecOptions};
use flgc_core::model::{Model, ModelConfig};
use flgc_core::plan::{compile, load_plan, save_plan};
use flgc_core::train::{evaluate, train, TrainConfig};

/// Input seed for benchmark batches; timing does not depend on the values.
const BENCH_INPUT_SEED: u64 = 7;

#[derive(Parser)]
#[command(name = "flgc", version, about = "Learnable group convolution toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model configuration on an MNIST-format dataset directory.
    Train {
        /// Model configuration JSON.
        #[arg(long)]
        config: PathBuf,
        /// Dataset directory (IDX files).
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint output directory.
        #[arg(long)]
        out: PathBuf,
        /// SGD iterations.
        #[arg(long, default_value_t = 500)]
        iters: usize,
        /// Learning rate.
        #[arg(long, default_value_t = 0.1)]
        lr: f64,
        /// Batch size.
        #[arg(long, default_value_t = 80)]
        batch: usize,
        /// Seed override; wins over FLGC_SEED and the configuration.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Report a checkpoint's accuracy on the test split.
    Eval {
        /// Checkpoint directory.
        #[arg(long)]
        ckpt: PathBuf,
        /// Dataset directory (IDX files).
        #[arg(long)]
        data: PathBuf,
        /// Evaluation batch size.
        #[arg(long, default_value_t = 256)]
        batch: usize,
    },
    /// Compile a checkpoint into an execution plan.
    Compile {
        /// Checkpoint directory.
        #[arg(long)]
        ckpt: PathBuf,
        /// Plan output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a plan on a tensor file and print logits.
    Run {
        /// Plan directory.
        #[arg(long)]
        plan: PathBuf,
        /// Input tensor file: JSON shape header line, then little-endian
        /// float32 values.
        #[arg(long)]
        input: PathBuf,
    },
    /// Time a plan per op and end to end.
    Bench {
        /// Plan directory.
        #[arg(long)]
        plan: PathBuf,
        /// Timed repetitions per subject.
        #[arg(long, default_value_t = 30)]
        reps: usize,
        /// Discarded warmup passes.
        #[arg(long, default_value_t = 5)]
        warmup: usize,
        /// Worker threads; above one, groups execute in parallel.
        #[arg(long, default_value_t = 1)]
        threads: usize,
    },
    /// Emit a cost report (CSV plus JSON) for a checkpoint or a plan.
    Analyze {
        /// Checkpoint directory.
        #[arg(long, required_unless_present = "plan", conflicts_with = "plan")]
        ckpt: Option<PathBuf>,
        /// Plan directory.
        #[arg(long)]
        plan: Option<PathBuf>,
        /// CSV output path; the JSON twin lands next to it.
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            e.exit()
        }
        Err(e) => {
            emit_error(&e.to_string());
            std::process::exit(2);
        }
    };
    if let Err(e) = dispatch(cli.command) {
        emit_error(&format!("{e:#}"));
        std::process::exit(1);
    }
}

/// One JSON error line on stderr; embedded newlines stay escaped, so the
/// line parses whole.
fn emit_error(msg: &str) {
    eprintln!("{}", json!({ "error": msg }));
}

/// Seed precedence: explicit flag, then FLGC_SEED, then the configuration.
fn resolve_seed(flag: Option<u64>, config_seed: u64) -> Result<u64> {
    if let Some(seed) = flag {
        return Ok(seed);
    }
    match std::env::var("FLGC_SEED") {
        Ok(v) => v.trim().parse().with_context(|| format!("FLGC_SEED {v:?}")),
        Err(std::env::VarError::NotPresent) => Ok(config_seed),
        Err(e) => Err(e).context("FLGC_SEED"),
    }
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Train { config, data, out, iters, lr, batch, seed } => {
            cmd_train(&config, &data, &out, iters, lr, batch, seed)
        }
        Command::Eval { ckpt, data, batch } => cmd_eval(&ckpt, &data, batch),
        Command::Compile { ckpt, out } => cmd_compile(&ckpt, &out),
        Command::Run { plan, input } => cmd_run(&plan, &input),
        Command::Bench { plan, reps, warmup, threads } => cmd_bench(&plan, reps, warmup, threads),
        Command::Analyze { ckpt, plan, out } => cmd_analyze(ckpt.as_deref(), plan.as_deref(), &out),
    }
}

fn cmd_train(
    config: &Path,
    data: &Path,
    out: &Path,
    iters: usize,
    lr: f64,
    batch: usize,
    seed: Option<u64>,
) -> Result<()> {
    let text =
        fs::read_to_string(config).with_context(|| format!("reading {}", config.display()))?;
    let mut config: ModelConfig =
        serde_json::from_str(&text).with_context(|| "parsing model configuration")?;
    config.seed = resolve_seed(seed, config.seed)?;

    let dataset = load_mnist(data, Split::Train)?;
    let mut model = Model::<f32>::build(&config)?;
    let mut cfg = TrainConfig::new(iters, lr);
    cfg.batch_size = batch;
    cfg.seed = config.seed;

    let metrics = train(&mut model, &dataset, &cfg, |m| {
        println!("{}", serde_json::to_string(m).expect("metrics serialize"));
    })?;
    checkpoint::save(&model, out)?;
    println!(
        "{}",
        json!({
            "event": "saved",
            "ckpt": out,
            "seed": config.seed,
            "iterations": metrics.len(),
            "final_loss": metrics.last().map(|m| m.loss),
        })
    );
    Ok(())
}

fn cmd_eval(ckpt: &Path, data: &Path, batch: usize) -> Result<()> {
    let model = checkpoint::load(ckpt)?;
    let dataset = load_mnist(data, Split::Test)?;
    let accuracy = evaluate(&model, &dataset, batch)?;
    println!(
        "{}",
        json!({ "model": model.config.name, "samples": dataset.len(), "accuracy": accuracy })
    );
    Ok(())
}

fn cmd_compile(ckpt: &Path, out: &Path) -> Result<()> {
    let model = checkpoint::load(ckpt)?;
    let plan = compile(&model)?;
    save_plan(&plan, out)?;
    println!(
        "{}",
        json!({ "event": "saved", "plan": plan.name, "ops": plan.ops.len(), "out": out })
    );
    Ok(())
}

fn cmd_run(plan: &Path, input: &Path) -> Result<()> {
    let plan = load_plan(plan)?;
    let x = tensor_file::read(input)?;
    let out = run_plan(&plan, &x)?;
    let batch = out.shape()[0];
    let row = out.len() / batch;
    let logits: Vec<&[f32]> = out.data().chunks(row).collect();
    let argmax: Vec<usize> = logits
        .iter()
        .map(|r| {
            r.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).map(|(i, _)| i).unwrap_or(0)
        })
        .collect();
    println!(
        "{}",
        json!({ "plan": plan.name, "shape": out.shape(), "argmax": argmax, "logits": logits })
    );
    Ok(())
}

fn cmd_bench(plan: &Path, reps: usize, warmup: usize, threads: usize) -> Result<()> {
    if threads == 0 {
        bail!("bench needs at least one thread");
    }
    let plan = load_plan(plan)?;
    let mut exec = ExecOptions::default();
    if threads > 1 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .context("sizing the worker pool")?;
        exec.parallel_groups = true;
    }
    let options = BenchOptions { reps, warmup, exec };

    let per_op = bench_plan_ops(&plan, 1, options, BENCH_INPUT_SEED)?;
    for (i, (op, t)) in plan.ops.iter().zip(&per_op).enumerate() {
        println!(
            "{}",
            json!({
                "op": i,
                "kind": op.kind(),
                "median_us": t.median_us,
                "p10_us": t.p10_us,
                "p90_us": t.p90_us,
                "reps": t.reps,
                "inner": t.inner,
            })
        );
    }
    let whole = bench_plan(&plan, 1, options, BENCH_INPUT_SEED)?;
    println!(
        "{}",
        json!({
            "plan": plan.name,
            "threads": threads,
            "median_us": whole.median_us,
            "p10_us": whole.p10_us,
            "p90_us": whole.p90_us,
            "reps": whole.reps,
            "inner": whole.inner,
        })
    );
    Ok(())
}

fn cmd_analyze(ckpt: Option<&Path>, plan: Option<&Path>, out: &Path) -> Result<()> {
    let (name, source, costs): (String, &str, Vec<LayerCost>) = match (ckpt, plan) {
        (Some(ckpt), None) => {
            let model = checkpoint::load(ckpt)?;
            (model.config.name.clone(), "model", model_costs(&model)?)
        }
        (None, Some(plan)) => {
            let plan = load_plan(plan)?;
            (plan.name.clone(), "plan", plan_costs(&plan)?)
        }
        _ => unreachable!("clap enforces exactly one source"),
    };
    let report = Report::new(&name, source, &costs, None, None)?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    let json_path = out.with_extension("json");
    flgc_core::analyze::write_csv(&report, out)?;
    flgc_core::analyze::write_json(&report, &json_path)?;
    println!(
        "{}",
        json!({
            "event": "saved",
            "source": source,
            "rows": report.rows.len(),
            "madds": costs.iter().map(|c| c.madds).sum::<u64>(),
            "params": costs.iter().map(|c| c.params).sum::<u64>(),
            "csv": out,
            "json": json_path,
        })
    );
    Ok(())
}
