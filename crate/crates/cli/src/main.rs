use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use tanmerge::fusion::Algorithm;
use tanmerge::{Error, Mode};

mod commands;
mod workspace;

/// Generate synthetic tasks, fine-tune, fuse and analyze small models.
#[derive(Parser, Debug)]
#[command(name = "tanmerge", version)]
struct Cli {
    /// TOML run configuration; defaults are used when omitted.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Output directory (overrides the config's `out_dir`).
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Master seed (overrides the config's `seed`).
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,
    /// Worker threads.
    #[arg(long, global = true, value_name = "N")]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the task suite and write one CSV per task.
    GenTasks,
    /// Fine-tune checkpoints.
    Finetune {
        /// Modes to train (default: all).
        #[arg(long)]
        mode: Vec<Mode>,
        /// Task ids to train (default: all).
        #[arg(long)]
        task: Vec<String>,
    },
    /// Merge fine-tuned checkpoints.
    Fuse(FuseArgs),
    /// Write analysis CSVs.
    Analyze {
        #[command(subcommand)]
        what: Analysis,
    },
    /// Aggregate per-subset fusion scores.
    Report,
    /// Every stage in order: gen-tasks, finetune, fuse --all-subsets, analyze, report.
    Run,
}

#[derive(Args, Debug)]
struct FuseArgs {
    /// Modes to fuse (default: every mode with checkpoints).
    #[arg(long)]
    mode: Vec<Mode>,
    /// Algorithms (default: all).
    #[arg(long)]
    algorithm: Vec<Algorithm>,
    /// Fuse every subset of two or more tasks.
    #[arg(long, conflicts_with = "task")]
    all_subsets: bool,
    /// Tasks of a single subset.
    #[arg(long)]
    task: Vec<String>,
    /// Rebuild a merged model from its provenance file and verify it.
    #[arg(long, value_name = "PATH", conflicts_with_all = ["all_subsets", "task", "algorithm", "mode"])]
    replay: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Analysis {
    /// Disentanglement-error grids for the configured task pairs.
    Disentangle {
        #[arg(long)]
        mode: Vec<Mode>,
    },
    /// Joint-loss grids spanned by pairs of fine-tuned models.
    Landscape {
        #[arg(long)]
        mode: Vec<Mode>,
    },
    /// Cosine similarity of task vectors.
    Similarity {
        #[arg(long)]
        mode: Vec<Mode>,
    },
    /// One-step kernel identity for the linearized modes.
    Ntk {
        #[arg(long)]
        mode: Vec<Mode>,
    },
}

fn dispatch(cli: Cli) -> tanmerge::Result<()> {
    if let Some(n) = cli.jobs {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Contract(format!("--jobs: {e}")))?;
    }
    let ws = workspace::Workspace::open(cli.config.as_deref(), cli.out, cli.seed)?;
    match cli.command {
        Command::GenTasks => commands::gen_tasks(&ws),
        Command::Finetune { mode, task } => commands::finetune(&ws, &mode, &task),
        Command::Fuse(a) => match a.replay {
            Some(path) => commands::replay(&ws, &path),
            None => commands::fuse(&ws, &a.mode, &a.algorithm, a.all_subsets, &a.task),
        },
        Command::Analyze { what } => match what {
            Analysis::Disentangle { mode } => commands::disentangle(&ws, &mode),
            Analysis::Landscape { mode } => commands::landscape(&ws, &mode),
            Analysis::Similarity { mode } => commands::similarity(&ws, &mode),
            Analysis::Ntk { mode } => commands::ntk(&ws, &mode),
        },
        Command::Report => commands::report(&ws),
        Command::Run => commands::run_all(&ws),
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
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numeric() { 2 } else { 1 })
        }
    }
}
