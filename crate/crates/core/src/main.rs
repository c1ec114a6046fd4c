use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use claimcheck::corpus::SplitFlag;
use claimcheck::judges::BackendKind;
use claimcheck::pipeline::{run, Command, Overrides, Stage, StageStatus};
use claimcheck::retrieval::RetrievalMode;

#[derive(Parser)]
#[command(name = "claimcheck", version, about = "Claim-level diagnostics for multimodal RAG")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
    /// Pipeline config file (TOML).
    #[arg(long, global = true, default_value = "claimcheck.toml")]
    config: PathBuf,
    /// Run a single retrieval mode.
    #[arg(long, global = true, value_parser = ["go", "gpd", "do"])]
    mode: Option<String>,
    /// Report a single split.
    #[arg(long, global = true)]
    split: Option<SplitArg>,
    /// Judge backend; `replay` also replays a system with a recorded cache.
    #[arg(long, global = true)]
    backend: Option<BackendArg>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    max_inflight: Option<usize>,
}

#[derive(Subcommand, Clone, Copy)]
enum Cmd {
    /// Normalize source files into the corpus store.
    Ingest,
    /// Load and normalize the embedding store.
    Index,
    /// Two-stage filtering and ambiguity labels.
    Filter,
    /// Build evidence packs and generate answers.
    Evaluate,
    /// Extract, judge and aggregate claims.
    Check,
    /// Aggregate metrics and write reports.
    Report,
    /// Every stage in order.
    All,
}

#[derive(ValueEnum, Clone, Copy)]
enum SplitArg {
    Filtered,
    Full,
}

#[derive(ValueEnum, Clone, Copy)]
enum BackendArg {
    Remote,
    Rule,
    Replay,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let command = match cli.command {
        Cmd::Ingest => Command::Stage(Stage::Ingest),
        Cmd::Index => Command::Stage(Stage::Index),
        Cmd::Filter => Command::Stage(Stage::Filter),
        Cmd::Evaluate => Command::Stage(Stage::Evaluate),
        Cmd::Check => Command::Stage(Stage::Check),
        Cmd::Report => Command::Stage(Stage::Report),
        Cmd::All => Command::All,
    };
    let overrides = Overrides {
        mode: cli.mode.map(|m| m.parse::<RetrievalMode>().expect("restricted by clap")),
        split: cli.split.map(|s| match s {
            SplitArg::Filtered => SplitFlag::Filtered,
            SplitArg::Full => SplitFlag::Full,
        }),
        backend: cli.backend.map(|b| match b {
            BackendArg::Remote => BackendKind::Remote,
            BackendArg::Rule => BackendKind::RuleBased,
            BackendArg::Replay => BackendKind::Replay,
        }),
        seed: cli.seed,
        out: cli.out,
        max_inflight: cli.max_inflight,
    };
    match run(command, &cli.config, &overrides) {
        Ok(stages) => {
            for (stage, status) in stages {
                let word = match status {
                    StageStatus::Ran => "done",
                    StageStatus::Skipped => "up to date",
                };
                println!("{stage}: {word}");
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
