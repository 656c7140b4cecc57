//! Experiment runner: corpus generation, curriculum runs, report
//! aggregation, and a gradient self-check, all driven by TOML configs.
//! Exits zero only when every requested step completed and the run
//! directories passed their manifest checks.

use std::fs;
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use sedcl_core::audio::corpus::{build_task_stream, manifest_to_jsonl, CorpusSpec};
use sedcl_core::audio::wav::wav_write;
use sedcl_core::experiment::{
    collect_report, report_to_csv, run, verify_run_dir, ExperimentConfig, Method, TaskOrder,
};
use sedcl_core::trainer::full_loss_grad_check;

#[derive(Parser)]
#[command(name = "sedcl", version, about = "Continual sound-event detection experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize a corpus into WAV files plus a JSONL manifest.
    GenCorpus(GenCorpusArgs),
    /// Run every seed of an experiment config and verify its artifacts.
    Run(RunArgs),
    /// Aggregate finished run directories into a summary CSV.
    Report(ReportArgs),
    /// Finite-difference check of the training-loss gradients.
    GradCheck(GradCheckArgs),
}

#[derive(Args)]
struct GenCorpusArgs {
    /// Corpus spec TOML.
    spec: PathBuf,
    /// Output directory for task<k>/<split>/clip<uid>.wav and manifest.jsonl.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct RunArgs {
    /// Experiment config TOML.
    config: PathBuf,
    /// Replace the config's seed list (repeatable).
    #[arg(long = "seed")]
    seeds: Vec<u64>,
    /// Replace the config's method.
    #[arg(long)]
    method: Option<String>,
    /// Replace the task order: "default" or comma-separated positions like "2,0,1".
    #[arg(long)]
    order: Option<String>,
    /// Replace the output directory.
    #[arg(long)]
    output_dir: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    /// Finished run directories.
    #[arg(required = true)]
    runs: Vec<PathBuf>,
    /// Write the CSV here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GradCheckArgs {
    /// Model init seeds to check (repeatable).
    #[arg(long = "seed", default_values_t = [1u64, 2, 3, 4, 5])]
    seeds: Vec<u64>,
    /// Maximum relative error tolerated.
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::GenCorpus(a) => gen_corpus(a),
        Command::Run(a) => run_experiment(a),
        Command::Report(a) => report(a),
        Command::GradCheck(a) => grad_check(a),
    }
}

fn gen_corpus(args: GenCorpusArgs) -> Result<()> {
    let text = fs::read_to_string(&args.spec)
        .with_context(|| format!("reading {}", args.spec.display()))?;
    let spec = CorpusSpec::from_toml_str(&text)?;
    let stream = build_task_stream(&spec)?;
    let pairs = stream.clips_and_records();
    for (clip, record) in &pairs {
        let path = args.out.join(&record.path);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        wav_write(clip, &path)?;
    }
    let records: Vec<_> = pairs.into_iter().map(|(_, r)| r).collect();
    fs::write(args.out.join("manifest.jsonl"), manifest_to_jsonl(&records))?;
    println!("wrote {} clips to {}", records.len(), args.out.display());
    Ok(())
}

fn run_experiment(args: RunArgs) -> Result<()> {
    let text = fs::read_to_string(&args.config)
        .with_context(|| format!("reading {}", args.config.display()))?;
    let mut cfg = ExperimentConfig::from_toml_str(&text)?;
    if !args.seeds.is_empty() {
        cfg.seeds = args.seeds;
    }
    if let Some(method) = &args.method {
        cfg.method = Method::from_name(method)
            .with_context(|| format!("unknown method {method:?}"))?;
    }
    if let Some(order) = &args.order {
        cfg.task_order = parse_order(order)?;
    }
    if let Some(dir) = args.output_dir {
        cfg.output_dir = dir;
    }
    cfg.validate()?;
    let runs = run(&cfg)?;
    verify_run_dir(&cfg.output_dir, &cfg.seeds)?;
    for r in &runs {
        let forgetting = match r.summary.avg_forgetting {
            Some(f) => format!("{:.2}", f * 100.0),
            None => "n/a".to_string(),
        };
        let combined = match r.summary.combined_avg_acc {
            Some(c) => format!(", combined {:.2}", c * 100.0),
            None => String::new(),
        };
        println!(
            "seed {}: avg_acc {:.2}, forgetting {forgetting}{combined}",
            r.seed,
            r.summary.avg_acc * 100.0
        );
    }
    println!("run ok: {}", cfg.output_dir.display());
    Ok(())
}

fn parse_order(s: &str) -> Result<TaskOrder> {
    if s == "default" {
        return Ok(TaskOrder::Default);
    }
    let positions: Vec<usize> = s
        .split(',')
        .map(|p| p.trim().parse::<usize>().with_context(|| format!("bad task position {p:?}")))
        .collect::<Result<_>>()?;
    Ok(TaskOrder::Permutation(positions))
}

fn report(args: ReportArgs) -> Result<()> {
    let rows = collect_report(&args.runs)?;
    let csv = report_to_csv(&rows);
    match &args.out {
        Some(path) => {
            fs::write(path, &csv)?;
            println!("wrote {} rows to {}", rows.len(), path.display());
        }
        None => print!("{csv}"),
    }
    Ok(())
}

fn grad_check(args: GradCheckArgs) -> Result<()> {
    if args.seeds.is_empty() {
        bail!("need at least one seed");
    }
    let mut worst = 0.0f64;
    for &seed in &args.seeds {
        let err = full_loss_grad_check(seed)?;
        println!("seed {seed}: max rel err {err:.3e}");
        worst = worst.max(err);
    }
    if worst >= args.tolerance {
        bail!("max rel err {worst:.3e} exceeds tolerance {:.3e}", args.tolerance);
    }
    println!("gradients ok over {} seeds", args.seeds.len());
    Ok(())
}
