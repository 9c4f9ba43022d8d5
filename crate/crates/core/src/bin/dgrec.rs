use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use dgrec::config::RunConfig;
use dgrec::pipeline::{self, Stage, StageOutput};

#[derive(Parser)]
#[command(name = "dgrec", version, about = "Retrieval-augmented recommendation over snapshot graphs")]
struct Cli {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Config override such as `train.bpr_epochs=10`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic interaction file and its planted blocks.
    Synth,
    /// Bucket interactions into snapshots and write the data manifest.
    Ingest,
    /// Train the base encoder on the pretraining snapshots.
    Pretrain,
    /// Extract and index the subgraph library.
    BuildLibrary,
    /// Label query/candidate pairs by relevance gain.
    Label,
    /// Pretrain the relevance model.
    TrainTam,
    /// Fine-tune with retrieved subgraphs on each later snapshot.
    Finetune,
    /// Score every fine-tune step on its next snapshot.
    Evaluate,
    /// Rank items for one user.
    Recommend {
        /// Raw user id as it appears in the interaction file.
        #[arg(long)]
        user: u64,
        #[arg(long, default_value_t = 20)]
        k: usize,
        /// Fine-tune step to serve from; the latest by default.
        #[arg(long)]
        step: Option<usize>,
    },
    /// Ingest through evaluate in one go.
    Run,
}

fn print(out: &StageOutput) {
    for (name, sha) in &out.artifacts {
        println!("{}\t{name}\t{sha}", out.stage);
    }
}

fn run(cli: Cli) -> Result<(), Box<dyn std::error::Error>> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p, &cli.overrides)?,
        None => RunConfig::from_toml_str("", &cli.overrides)?,
    };
    cfg.apply_env();
    let stage = match cli.command {
        Command::Synth => {
            print(&pipeline::synth_stage(&cfg)?);
            return Ok(());
        }
        Command::Run => {
            pipeline::run_all(&cfg)?.iter().for_each(print);
            return Ok(());
        }
        Command::Recommend { user, k, step } => {
            pipeline::recommend(&cfg, user, step, k)?.write(std::io::stdout().lock())?;
            return Ok(());
        }
        Command::Ingest => Stage::Ingest,
        Command::Pretrain => Stage::Pretrain,
        Command::BuildLibrary => Stage::BuildLibrary,
        Command::Label => Stage::Label,
        Command::TrainTam => Stage::TrainTam,
        Command::Finetune => Stage::Finetune,
        Command::Evaluate => Stage::Evaluate,
    };
    print(&pipeline::run_stage(stage, &cfg)?);
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
