use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use flowlab_cli::commands::{self, CommonArgs};

/// Generative-model lab: trains score, denoising, flow and line-based
/// samplers on synthetic mixtures and measures how straight their sampling
/// paths run.
#[derive(Parser)]
#[command(name = "flowlab", version, about, max_term_width = 100)]
struct Cli {
    /// Experiment configuration (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Overrides the seed in the config.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Overrides the output directory in the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Caps every budget so the full pipeline finishes in seconds.
    #[arg(long, global = true)]
    smoke: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generates (or reuses) the teacher-coupled pair dataset.
    Pairgen,
    /// Trains every configured method and writes checkpoints.
    Train,
    /// Samples trained checkpoints and writes metric reports.
    Eval,
    /// Runs the random-matching scaling study.
    Otstudy,
    /// Full pipeline: pairs, training, evaluation, summary table.
    ReproduceTraj,
    /// Audits every training gradient against finite differences.
    Gradcheck,
    /// Re-hashes recorded artifacts and reports mismatches.
    Verify,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    flowlab_cli::init_threads();

    let config = match &cli.config {
        Some(p) => p.clone(),
        None => {
            eprintln!("error: --config is required");
            return ExitCode::FAILURE;
        }
    };
    let args = CommonArgs { config, seed: cli.seed, out: cli.out, smoke: cli.smoke };

    let result = match cli.command {
        Command::Pairgen => commands::cmd_pairgen(&args),
        Command::Train => commands::cmd_train(&args),
        Command::Eval => commands::cmd_eval(&args),
        Command::Otstudy => commands::cmd_otstudy(&args),
        Command::ReproduceTraj => commands::cmd_reproduce(&args),
        Command::Gradcheck => commands::cmd_gradcheck(&args),
        Command::Verify => commands::cmd_verify(&args.config, args.out.as_deref()),
    };

    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
