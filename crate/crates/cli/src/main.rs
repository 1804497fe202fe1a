use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use moelab::distill::Method;
use moelab_cli::commands::{self, AnalyzeKind};
use moelab_cli::{CliError, Overrides, RunConfig, Session};

#[derive(Parser)]
#[command(name = "moelab", version, about = "Distill mixture-of-experts teachers into dense students")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration; built-in defaults when omitted.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,
    /// sft, kd, gkd, all, ka or sar.
    #[arg(long, global = true, value_name = "NAME")]
    method: Option<Method>,
    /// Probability of sampling the augmentation experts.
    #[arg(long, global = true, value_name = "R")]
    lambda: Option<f64>,
    /// Teacher forwards per sampled response under augmentation.
    #[arg(long = "M", global = true, value_name = "N")]
    augment_count: Option<usize>,
    /// Weight of the balancing term in the router objective.
    #[arg(long, global = true, value_name = "R")]
    beta: Option<f64>,
    /// Teacher top-k for kd/gkd and the gate-mass report.
    #[arg(long, global = true, value_name = "N")]
    k: Option<usize>,
    /// Output directory.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train the teacher and the student's supervised starting point.
    Pretrain,
    /// Distill into the student with the configured method.
    Distill,
    /// Write a gate-mass, router-shift or k-sweep report.
    Analyze {
        #[arg(long, value_enum)]
        kind: AnalyzeKind,
        /// Updated teacher for router-shift (default: the sar run's teacher).
        #[arg(long, value_name = "PATH")]
        against: Option<PathBuf>,
    },
    /// Score a checkpoint by greedy ROUGE-L on held-out data.
    Eval {
        /// Default: the student distilled with the configured method.
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
        /// Number of test sets (seeds seed..seed+N) to average over.
        #[arg(long, value_name = "N")]
        seeds: Option<usize>,
    },
    /// Distill and score every entry of the [sweep] grid.
    Sweep,
}

fn execute(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let c = cli.common;
    cfg.apply(&Overrides {
        seed: c.seed,
        method: c.method,
        lambda: c.lambda,
        augment_count: c.augment_count,
        beta: c.beta,
        k: c.k,
        out: c.out,
    });
    let session = Session::open(cfg)?;
    match cli.command {
        Command::Pretrain => {
            let s = commands::pretrain(&session)?;
            println!(
                "teacher test accuracy {:.4}, student test accuracy {:.4}",
                s.teacher.test_accuracy, s.student.test_accuracy
            );
        }
        Command::Distill => {
            let s = commands::distill(&session)?;
            println!(
                "{}: {} steps, loss {:.4} -> {:.4}, ROUGE-L {:.4}",
                s.tag, s.steps, s.initial_loss, s.final_loss, s.rouge_l
            );
        }
        Command::Analyze { kind, against } => {
            let files = commands::analyze(&session, kind, against.as_deref())?;
            println!("{}\n{}", files.csv.display(), files.json.display());
        }
        Command::Eval { checkpoint, seeds } => {
            let (s, path) = commands::eval(&session, checkpoint.as_deref(), seeds)?;
            println!("mean ROUGE-L {:.4} over {} seed(s): {}", s.mean_f, s.seeds.len(), path.display());
        }
        Command::Sweep => {
            let (rows, files) = commands::sweep(&session)?;
            for r in rows {
                println!("{:<24} loss {:.4} -> {:.4}  ROUGE-L {:.4}", r.tag, r.initial_loss, r.final_loss, r.rouge_l);
            }
            println!("{}", files.csv.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let code = e.downcast_ref::<CliError>().map_or(1, CliError::exit_code);
            ExitCode::from(code as u8)
        }
    }
}
