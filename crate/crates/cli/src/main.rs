use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use msflow_core::config::RunConfig;
use msflow_core::scoring::Aggregation;
use msflow_core::{par, pipeline, Error, ErrorClass};

/// Multi-scale normalizing-flow anomaly detection.
#[derive(Debug, Parser)]
#[command(name = "msflow", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the synthetic texture dataset with toy-extractor features.
    Gen(Common),
    /// Train a model on the normal training split.
    Train(Common),
    /// Score the test split with a trained checkpoint.
    Score(WithCheckpoint),
    /// Compute AUROC and PRO from the score files.
    Eval(Common),
    /// Audit a checkpoint for invertibility.
    Check(WithCheckpoint),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Agg {
    Add,
    Mul,
    Both,
}

#[derive(Debug, Args)]
struct Common {
    /// INI config file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads (0 = all cores).
    #[arg(long)]
    jobs: Option<usize>,
    #[arg(long)]
    k_fraction: Option<f64>,
    #[arg(long, value_enum)]
    agg: Option<Agg>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct WithCheckpoint {
    #[command(flatten)]
    common: Common,
    /// Checkpoint directory (default `<out>/checkpoint`).
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

fn resolve(c: &Common) -> Result<RunConfig, Error> {
    let mut cfg = RunConfig::default();
    if let Some(path) = &c.config {
        cfg.apply_file(path)?;
    }
    cfg.apply_env(std::env::vars())?;
    if let Some(v) = c.seed {
        cfg.seed = v;
        cfg.train.seed = v;
    }
    if let Some(v) = c.jobs {
        cfg.jobs = v;
    }
    if let Some(v) = c.k_fraction {
        cfg.k_fraction = v;
    }
    if let Some(v) = c.agg {
        cfg.agg = match v {
            Agg::Add => Aggregation::Add,
            Agg::Mul => Aggregation::Mul,
            Agg::Both => Aggregation::Both,
        };
    }
    if let Some(v) = &c.out {
        cfg.out = v.clone();
    }
    cfg.train.seed = cfg.seed;
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<bool, Error> {
    let common = match &cli.command {
        Command::Gen(c) | Command::Train(c) | Command::Eval(c) => c,
        Command::Score(w) | Command::Check(w) => &w.common,
    };
    let cfg = resolve(common)?;
    par::with_jobs(cfg.jobs, || match &cli.command {
        Command::Gen(_) => {
            let m = pipeline::cmd_gen(&cfg)?;
            println!("wrote {} train and {} test samples to {}", m.train.len(), m.test.len(), cfg.out.join("dataset").display());
            Ok(true)
        }
        Command::Train(_) => {
            let (_, log) = pipeline::cmd_train(&cfg)?;
            if let Some(last) = log.epochs.last() {
                println!("final loss {:.6} checksum {}", last.loss, last.checksum);
            }
            Ok(true)
        }
        Command::Score(w) => {
            let rows = pipeline::cmd_score(&cfg, w.checkpoint.as_deref())?;
            println!("scored {} images", rows.len());
            Ok(true)
        }
        Command::Eval(_) => {
            let r = pipeline::cmd_eval(&cfg)?;
            println!("det_auroc {:.4} loc_auroc {:.4} loc_pro {:.4}", r.det_auroc, r.loc_auroc, r.loc_pro);
            Ok(true)
        }
        Command::Check(w) => {
            let r = pipeline::cmd_check(&cfg, w.checkpoint.as_deref())?;
            println!(
                "{} max_abs_error {:e} max_logdet_error {:e} over {} samples",
                if r.passed { "pass" } else { "FAIL" },
                r.max_abs_error,
                r.max_logdet_error,
                r.samples
            );
            Ok(r.passed)
        }
    })?
}

fn exit_code(class: ErrorClass) -> u8 {
    match class {
        ErrorClass::Config => 1,
        ErrorClass::Data => 2,
        ErrorClass::Numerical => 3,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(3),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(e.class()))
        }
    }
}
