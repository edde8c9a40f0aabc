use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use samdkif_cli::config::RunConfig;
use samdkif_cli::harness;

/// Skill-adapter training, routing, and fusion over a small
/// transformer, with a reproducible experiment suite.
#[derive(Parser)]
#[command(name = "samdkif", version, about)]
struct Cli {
    /// Run configuration in TOML; defaults apply when omitted.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Master seed, overriding the configured one.
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,

    /// Output directory, overriding the configured one.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,

    /// Dotted-path config override, e.g. --set model.n_layers=4.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the pretraining text, skill corpora, and task datasets.
    GenData,
    /// Train the base model on the pretraining text.
    Pretrain,
    /// Train one adapter per configured skill against the frozen base.
    TrainSkill {
        /// Train just this skill.
        #[arg(long, value_name = "SKILL")]
        only: Option<String>,
        /// Train the skills on separate threads.
        #[arg(long)]
        parallel: bool,
    },
    /// Fit a router to a downstream task's adaptation split.
    Adapt {
        #[arg(long, value_name = "TASK")]
        task: String,
        /// normal (gradient descent) or fewshot (evolution strategy).
        #[arg(long, default_value = "normal")]
        method: String,
        /// Skill budget; defaults to every trained skill.
        #[arg(long, value_name = "N")]
        k: Option<usize>,
        /// Index for repeated runs under different seeds.
        #[arg(long, default_value_t = 0)]
        sample: usize,
    },
    /// Fold a router's weighted skill deltas into standalone weights.
    Fuse {
        /// Router checkpoint, relative to the output directory.
        #[arg(long, value_name = "PATH")]
        router: String,
    },
    /// Evaluate a base or fused checkpoint on a task's test split.
    Eval {
        /// Checkpoint, relative to the output directory.
        #[arg(long, value_name = "PATH")]
        checkpoint: String,
        #[arg(long, value_name = "TASK")]
        task: String,
        /// Which split family to evaluate under: normal or fewshot.
        #[arg(long, default_value = "normal")]
        setting: String,
    },
    /// Adapt routers across growing skill budgets and tabulate scores.
    SweepSkills {
        /// Comma-separated budgets, e.g. --k 1,2,4.
        #[arg(long, value_name = "KS", value_delimiter = ',')]
        k: Option<Vec<usize>>,
    },
    /// Run the full pipeline and enforce the built-in result checks.
    ReproSuite {
        /// Train the skills on separate threads.
        #[arg(long)]
        parallel: bool,
    },
    /// Verify every artifact against the manifests that claim it.
    Audit,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {e}", e.category());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(cli: Cli) -> samdkif_core::error::Result<()> {
    let mut overrides = cli.set.clone();
    if let Some(seed) = cli.seed {
        overrides.push(format!("run.seed={seed}"));
    }
    if let Some(out) = &cli.out {
        overrides.push(format!("run.out_dir={}", out.display()));
    }
    let cfg = RunConfig::load(cli.config.as_deref(), &overrides)?;

    match &cli.command {
        Command::GenData => harness::cmd_gen_data(&cfg),
        Command::Pretrain => harness::cmd_pretrain(&cfg),
        Command::TrainSkill { only, parallel } => {
            harness::cmd_train_skill(&cfg, only.as_deref(), *parallel)
        }
        Command::Adapt {
            task,
            method,
            k,
            sample,
        } => harness::cmd_adapt(&cfg, task, method, *k, *sample),
        Command::Fuse { router } => harness::cmd_fuse(&cfg, router),
        Command::Eval {
            checkpoint,
            task,
            setting,
        } => harness::cmd_eval(&cfg, checkpoint, task, setting),
        Command::SweepSkills { k } => harness::cmd_sweep_skills(&cfg, k.clone()),
        Command::ReproSuite { parallel } => harness::cmd_repro_suite(&cfg, *parallel),
        Command::Audit => harness::cmd_audit(&cfg),
    }
}
