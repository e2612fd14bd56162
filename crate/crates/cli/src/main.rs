//! Batch experiment runner: seeded data generation, corpus filtering,
//! teacher pre-training, student distillation, rollout, evaluation, and the
//! ablation grid.
//!
//! Exit codes: 0 success, 2 invalid configuration, 3 runtime failure.

use clap::{Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;
use talkflow::config::{load_config, ExperimentConfig};
use talkflow::distill::DistillMode;
use talkflow::experiment;

#[derive(Parser)]
#[command(name = "talkflow", version, about = "Chunk-wise flow-matching experiment runner")]
struct Cli {
    /// Path to a JSON config; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Dotted-path override, repeatable: --set distill.mode=asymmetric
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,

    /// Output directory for this run.
    #[arg(long, global = true, default_value = "runs/out")]
    out: PathBuf,

    /// Global seed override.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Refuse checkpoints whose config hash disagrees with this run.
    #[arg(long, global = true)]
    strict: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic corpus (clean and corrupted clips) plus manifest.
    GenData,
    /// Dedup, standardize, and filter a corpus manifest into training tuples.
    FilterCorpus {
        /// Path to the manifest.ndjson written by gen-data.
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Pre-train and freeze the teacher.
    TrainTeacher,
    /// Distill the student (and critic) from a frozen teacher checkpoint.
    Distill {
        #[arg(long)]
        teacher: PathBuf,
        /// Conditioning topology; overrides the config when given.
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
    },
    /// Generate frames from a student checkpoint.
    Rollout {
        #[arg(long)]
        student: PathBuf,
    },
    /// Drift curves and throughput for a student checkpoint.
    Eval {
        #[arg(long)]
        student: PathBuf,
        /// Optional teacher checkpoint for the many-step baseline.
        #[arg(long)]
        teacher: Option<PathBuf>,
    },
    /// Run the identity-scheme x distillation grid plus the three
    /// conditioning-topology modes; emits one comparison table.
    Ablate,
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum ModeArg {
    Asymmetric,
    SymmetricGt,
    SymmetricGen,
}

impl From<ModeArg> for DistillMode {
    fn from(m: ModeArg) -> DistillMode {
        match m {
            ModeArg::Asymmetric => DistillMode::Asymmetric,
            ModeArg::SymmetricGt => DistillMode::SymmetricGt,
            ModeArg::SymmetricGen => DistillMode::SymmetricGen,
        }
    }
}

fn resolve_config(cli: &Cli) -> talkflow::Result<ExperimentConfig> {
    let mut config = load_config(cli.config.as_deref(), &cli.overrides)?;
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    if let Command::Distill {
        mode: Some(mode), ..
    } = &cli.command
    {
        config.distill.mode = (*mode).into();
    }
    config.validate()?;
    Ok(config)
}

fn run(cli: &Cli, config: &ExperimentConfig) -> talkflow::Result<()> {
    match &cli.command {
        Command::GenData => experiment::run_gen_data(config, &cli.out),
        Command::FilterCorpus { manifest } => {
            experiment::run_filter_corpus(config, manifest, &cli.out)
        }
        Command::TrainTeacher => experiment::run_train_teacher(config, &cli.out),
        Command::Distill { teacher, .. } => {
            experiment::run_distill(config, teacher, &cli.out, cli.strict)
        }
        Command::Rollout { student } => {
            experiment::run_rollout(config, student, &cli.out, cli.strict)
        }
        Command::Eval { student, teacher } => {
            experiment::run_eval(config, student, teacher.as_deref(), &cli.out, cli.strict)
        }
        Command::Ablate => experiment::run_ablate(config, &cli.out),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let config = match resolve_config(&cli) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    match run(&cli, &config) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if e.code() == "config-invalid" {
                ExitCode::from(2)
            } else {
                ExitCode::from(3)
            }
        }
    }
}
