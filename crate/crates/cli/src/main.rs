use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dermqa::config::{Overrides, PipelineConfig};
use dermqa::{pipeline, synthetic, Result};

#[derive(Parser)]
#[command(name = "dermqa", version, about = "Closed-form dermatology VQA pipeline")]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct GlobalArgs {
    /// Pipeline config (JSON). Relative paths inside it resolve against its directory.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    split: Option<String>,
    /// Use deterministic mock backends driven by the configured fixtures.
    #[arg(long, global = true)]
    mock_backends: bool,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[arg(long, global = true)]
    output_dir: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Validate images, build per-image samples and write batch files.
    Preprocess,
    /// Ingest and index the knowledge base.
    BuildKb,
    /// Run the agents and decision loop over every encounter and family.
    Run,
    /// Merge per-image predictions into submission files.
    Aggregate,
    /// Score the submission against gold annotations.
    Evaluate,
    /// Pairwise agreement between gold, the pipeline and advisory models.
    Agreement,
    /// Write a synthetic split with mock fixtures and a config.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 10)]
        encounters: usize,
        #[arg(long, default_value_t = 42)]
        seed: u64,
    },
}

fn execute(cli: Cli) -> Result<String> {
    let g = cli.global;
    let load = || {
        PipelineConfig::load(
            g.config.as_deref(),
            &Overrides {
                split: g.split.clone(),
                seed: g.seed,
                workers: g.workers,
                mock_backends: g.mock_backends,
                output_dir: g.output_dir.clone(),
            },
        )
    };
    let manifest = match cli.command {
        Command::Synth { out, encounters, seed } => {
            let split = synthetic::generate(&out, encounters, seed)?;
            return Ok(format!(
                "wrote synthetic split to {}; config at {}",
                out.display(),
                split.config.display()
            ));
        }
        Command::Preprocess => pipeline::cmd_preprocess(&load()?)?,
        Command::BuildKb => pipeline::cmd_build_kb(&load()?)?,
        Command::Run => pipeline::cmd_run(&load()?)?.manifest,
        Command::Aggregate => pipeline::cmd_aggregate(&load()?)?,
        Command::Evaluate => pipeline::cmd_evaluate(&load()?)?,
        Command::Agreement => pipeline::cmd_agreement(&load()?)?,
    };
    Ok(summarize(&manifest))
}

fn summarize(manifest: &pipeline::Manifest) -> String {
    let counts: Vec<String> = manifest
        .counts
        .iter()
        .filter(|(_, v)| v.is_number() || v.is_string() || v.is_boolean())
        .map(|(k, v)| format!("{k}={v}"))
        .collect();
    format!("{} done: {}", manifest.command, counts.join(" "))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match execute(Cli::parse()) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            log::debug!("{e:?}");
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
