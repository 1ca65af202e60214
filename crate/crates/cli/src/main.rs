//! `unode` — one-class novelty detection at desk scale.

use std::path::PathBuf;

use clap::{Parser, Subcommand};

use unode_cli::config::RunConfig;
use unode_cli::{commands, exit_code};

/// One-class novelty detection: automatic hard-augmentation selection,
/// contrastive + rejection training, combined scoring, and a Gaussian
/// error-model check.
#[derive(Parser)]
#[command(name = "unode", version, arg_required_else_help = true)]
struct Cli {
    /// Run configuration (`key = value` lines, `#` comments); defaults
    /// apply when omitted.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Override the configured seed.
    #[arg(long, global = true, value_name = "U64")]
    seed: Option<u64>,

    /// Override the configured output directory.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,

    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Weight the candidate hard augmentations for the configured data.
    Augweights,
    /// Train the model and write checkpoint, loss log, and score artifacts.
    Train {
        /// Continue from the checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
        /// Stop after this many optimizer steps (checkpoint and exit).
        #[arg(long, value_name = "N")]
        max_steps: Option<u64>,
    },
    /// Score the test split with the trained artifacts.
    Score,
    /// One-class protocol: train per class, report AUROC per class.
    EvalOneclass {
        /// Skip training and report the random-initialization baseline.
        #[arg(long)]
        untrained: bool,
    },
    /// One-class protocol on corrupted test sets (class x corruption grid).
    EvalCorrupt,
    /// Pooled-inlier training scored against held-out outlier classes.
    EvalMulticlass,
    /// Check the Gaussian error model: analytic sweep against Monte Carlo.
    Theory,
}

fn run(cli: &Cli) -> unode_core::Result<()> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.out = out.clone();
    }
    match cli.cmd {
        Cmd::Augweights => commands::cmd_augweights(&cfg),
        Cmd::Train { resume, max_steps } => commands::cmd_train(&cfg, resume, max_steps),
        Cmd::Score => commands::cmd_score(&cfg),
        Cmd::EvalOneclass { untrained } => commands::cmd_eval_oneclass(&cfg, untrained),
        Cmd::EvalCorrupt => commands::cmd_eval_corrupt(&cfg),
        Cmd::EvalMulticlass => commands::cmd_eval_multiclass(&cfg),
        Cmd::Theory => commands::cmd_theory(&cfg),
    }
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version requests arrive here too; only real usage
            // mistakes take the error path.
            let code = i32::from(e.use_stderr());
            let _ = e.print();
            std::process::exit(code);
        }
    };
    if let Err(e) = run(&cli) {
        eprintln!("error: {e}");
        std::process::exit(exit_code(&e));
    }
}
