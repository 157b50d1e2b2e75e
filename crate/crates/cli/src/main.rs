//! `alrgan` command-line driver.
//!
//! Exit codes: 0 success, 1 gradient check failure or other runtime error,
//! 2 configuration error, 3 numeric fault.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use alrgan::config::RunConfig;
use alrgan::experiment::{self, EvalMetrics};
use alrgan::gradsuite;
use alrgan::tensor::Fault;
use alrgan::Error;
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "alrgan", version, about = "Adaptive layout refinement GAN: train, ablate, sweep, check, evaluate")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run configuration (flat `key = value` file); defaults when omitted.
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Override the number of training steps.
    #[arg(long)]
    steps: Option<usize>,
    /// Override the output directory.
    #[arg(short, long)]
    output: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model; writes losses.csv, metrics.csv and checkpoints.
    Train(Common),
    /// Train the five ablation variants for each seed; writes ablation.csv.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Seeds shared by every variant.
        #[arg(long, value_delimiter = ',', default_values_t = [1u64, 2, 3])]
        seeds: Vec<u64>,
    },
    /// One run per value of a parameter; writes sweep_<param>.csv.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// gamma, eta1, eta2, m or lambda1.
        #[arg(long)]
        param: String,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
    },
    /// Finite-difference check of every operation and composite loss.
    Gradcheck {
        /// Replace both default tolerances.
        #[arg(long)]
        tol: Option<f64>,
        /// Seeded points per check.
        #[arg(long, default_value_t = gradsuite::POINTS)]
        points: usize,
        /// Negate the backward of the named tape operation (harness self-test).
        #[arg(long, hide = true)]
        inject_fault: Option<String>,
    },
    /// Metrics of a checkpoint on the held-out set, as CSV on stdout.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Test-mode images as binary PPM files, one per stage and caption.
    Gen {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Caption text, e.g. "red circle center plain"; repeatable.
        #[arg(long)]
        caption: Vec<String>,
        /// Held-out captions to use when no caption is given.
        #[arg(long, default_value_t = 4)]
        count: usize,
    },
}

fn load(common: &Common) -> alrgan::Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    }
    .with_env_seed()?;
    if let Some(s) = common.steps {
        cfg.gan.steps = s;
    }
    if let Some(o) = &common.output {
        cfg.output_dir = o.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn log(msg: &str) {
    eprintln!("{msg}");
}

fn print_metrics(step: u64, m: &EvalMetrics) {
    println!("step,toy_fid,inception_score,r_precision,layout_agreement,target_layout_agreement");
    println!(
        "{step},{},{},{},{},{}",
        m.toy_fid, m.inception_score, m.r_precision, m.layout_agreement, m.target_layout_agreement
    );
}

fn gradcheck(tol: Option<f64>, points: usize, fault: Option<String>) -> alrgan::Result<bool> {
    if let Some(t) = tol {
        if t.is_nan() || t <= 0.0 {
            return Err(Error::Config(format!("--tol must be positive, got {t}")));
        }
    }
    if points == 0 {
        return Err(Error::Config("--points must be at least 1".into()));
    }
    let fault = fault.map(|op| Fault::FlipSign(Box::leak(op.into_boxed_str())));
    let results = gradsuite::run(points, tol, fault)?;
    println!("{:<22} {:<9} {:>12} {:>10}  result", "check", "kind", "max_error", "tolerance");
    for r in &results {
        let kind = match r.kind {
            gradsuite::Kind::Op => "op",
            gradsuite::Kind::Composite => "composite",
        };
        println!(
            "{:<22} {:<9} {:>12.3e} {:>10.0e}  {}",
            r.name,
            kind,
            r.max_error,
            r.tolerance,
            if r.passed { "pass" } else { "FAIL" }
        );
    }
    let failed: Vec<&str> = results.iter().filter(|r| !r.passed).map(|r| r.name).collect();
    if failed.is_empty() {
        println!("all {} checks passed", results.len());
        Ok(true)
    } else {
        eprintln!("gradient check failed: {}", failed.join(", "));
        Ok(false)
    }
}

fn run(cli: Cli) -> alrgan::Result<bool> {
    match cli.command {
        Command::Train(common) => {
            let cfg = load(&common)?;
            experiment::train_run(&cfg, &log)?;
        }
        Command::Ablate { common, seeds } => {
            let cfg = load(&common)?;
            experiment::ablate(&cfg, &seeds, &log)?;
            log(&format!("wrote {}", cfg.output_dir.join(experiment::ABLATION_CSV).display()));
        }
        Command::Sweep { common, param, values } => {
            let cfg = load(&common)?;
            experiment::sweep(&cfg, &param, &values, &log)?;
            log(&format!("wrote {}", cfg.output_dir.join(experiment::sweep_csv(&param)).display()));
        }
        Command::Gradcheck { tol, points, inject_fault } => return gradcheck(tol, points, inject_fault),
        Command::Eval { common, checkpoint } => {
            let cfg = load(&common)?;
            let (step, m) = experiment::eval_checkpoint(&cfg, &checkpoint)?;
            print_metrics(step, &m);
        }
        Command::Gen { common, checkpoint, caption, count } => {
            let cfg = load(&common)?;
            let out: &Path = &cfg.output_dir;
            let files = experiment::gen(&cfg, &checkpoint, &caption, count, out)?;
            log(&format!("wrote {} images to {}", files.len(), out.display()));
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                Error::Config(_) | Error::Vocabulary(_) => 2,
                Error::Numeric(_) => 3,
                _ => 1,
            })
        }
    }
}
