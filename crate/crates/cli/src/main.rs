use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

mod commands;

#[derive(Parser)]
#[command(
    name = "metasv",
    version,
    about = "Meta-learning speaker verification on synthetic speakers"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic corpus (and optionally the held-out trial list).
    GenCorpus {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        trials: Option<PathBuf>,
        /// Overrides the config's top-level seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train one system; writes checkpoint.bin and metrics.csv into --out.
    Train {
        #[arg(long)]
        system: String,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Training seed; defaults to the first experiment seed in the config.
        #[arg(long)]
        seed: Option<u64>,
        /// Skip stage 1 and train stage 2 on the checkpoint given by --init.
        #[arg(long)]
        stage2_only: bool,
        #[arg(long)]
        init: Option<PathBuf>,
    },
    /// Score a trial list with a checkpoint; writes scores.txt and metrics.json into --out.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        trials: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Label written into metrics.json; defaults to the checkpoint's parent directory name.
        #[arg(long)]
        system: Option<String>,
        /// Reads the detection-cost parameters from this run config.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Equal-weight fusion of two score files over the same trial list.
    Fuse {
        #[arg(long)]
        scores_a: PathBuf,
        #[arg(long)]
        scores_b: PathBuf,
        #[arg(long)]
        trials: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Run every configured system over every configured seed and write the report.
    Experiment {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the config's output_dir.
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Finite-difference check of every primitive, loss and forward path.
    Gradcheck {
        #[arg(long, default_value_t = 10)]
        seeds: u64,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenCorpus {
            config,
            out,
            trials,
            seed,
        } => commands::gen_corpus(&config, &out, trials.as_deref(), seed),
        Command::Train {
            system,
            config,
            corpus,
            out,
            seed,
            stage2_only,
            init,
        } => commands::train(
            &system,
            &config,
            &corpus,
            &out,
            seed,
            stage2_only,
            init.as_deref(),
        ),
        Command::Eval {
            checkpoint,
            corpus,
            trials,
            out,
            system,
            config,
        } => commands::eval(
            &checkpoint,
            &corpus,
            &trials,
            &out,
            system.as_deref(),
            config.as_deref(),
        ),
        Command::Fuse {
            scores_a,
            scores_b,
            trials,
            out,
            config,
        } => commands::fuse(&scores_a, &scores_b, &trials, &out, config.as_deref()),
        Command::Experiment { config, out_dir } => {
            commands::experiment(&config, out_dir.as_deref())
        }
        Command::Gradcheck { seeds } => commands::gradcheck(seeds),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
