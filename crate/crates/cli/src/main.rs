use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::Parser;

use remembra::config::{Experiment, ExperimentConfig};
use remembra::experiment::{run, write_outputs};
use remembra::par::{self, Parallelism};

/// Runs a sequential-learning experiment: pretraining, meta-training, meta-testing,
/// baseline unrolls and readout probing. Writes CSV metrics and a comparison table.
#[derive(Parser, Debug)]
#[command(name = "remembra", version)]
struct Args {
    /// Configuration file of `key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,

    /// Experiment id: seq-transfer, new-classes, new-ckpt, three-task or synthetic.
    #[arg(long)]
    experiment: Option<Experiment>,

    /// Comma-separated methods: teacher, meta, sgd, sgd0.1, ewc, lwf.
    #[arg(long)]
    methods: Option<String>,

    /// Seed count `n` (seeds 0..n) or an explicit comma-separated list.
    #[arg(long)]
    seeds: Option<String>,

    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,

    /// Print the resolved configuration and exit.
    #[arg(long)]
    dry_run: bool,

    /// Record meta-learner gates during meta-testing and write a histogram per seed.
    #[arg(long)]
    log_gates: bool,

    /// Run seeds one after another even when the parallel pool is available.
    #[arg(long)]
    sequential: bool,
}

fn resolve(args: &Args) -> Result<ExperimentConfig> {
    let mut cfg = match &args.config {
        Some(path) => {
            let text =
                std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
            ExperimentConfig::parse(&text, args.experiment)
                .with_context(|| format!("in config {}", path.display()))?
        }
        None => {
            let e = args
                .experiment
                .context("missing config key `experiment` (pass --experiment or --config)")?;
            ExperimentConfig::defaults(e)
        }
    };
    if let (Some(e), Some(_)) = (args.experiment, &args.config) {
        if e != cfg.experiment {
            anyhow::bail!(
                "--experiment {} conflicts with `experiment = {}` in the config file",
                e.id(),
                cfg.experiment.id()
            );
        }
    }
    if let Some(m) = &args.methods {
        cfg.set("methods", m)?;
    }
    if let Some(s) = &args.seeds {
        cfg.set("seeds", s)?;
    }
    if let Some(o) = &args.out {
        cfg.out = o.clone();
    }
    if args.log_gates {
        cfg.unroll.log_gates = true;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn threads_from_env() -> Result<()> {
    if let Ok(v) = std::env::var("REMEMBRA_THREADS") {
        let n: usize = v
            .trim()
            .parse()
            .with_context(|| format!("REMEMBRA_THREADS must be a positive integer, got `{v}`"))?;
        anyhow::ensure!(n > 0, "REMEMBRA_THREADS must be a positive integer, got 0");
        par::init_threads(n);
    }
    Ok(())
}

fn main_inner() -> Result<()> {
    let args = Args::parse();
    let cfg = resolve(&args)?;
    if args.dry_run {
        print!("{cfg}");
        return Ok(());
    }
    threads_from_env()?;
    let mode = if args.sequential || !par::available() {
        Parallelism::Sequential
    } else {
        Parallelism::Parallel
    };
    let report = run(&cfg, mode)?;
    let written = write_outputs(&cfg, &report)?;
    print!("{}", report.table.to_text());
    eprintln!("wrote {} files to {}", written.len(), cfg.out.display());
    Ok(())
}

fn main() -> ExitCode {
    match main_inner() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
