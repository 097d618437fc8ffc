use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use fcre_core::cli::{self, Branch, ExperimentConfig};
use fcre_core::{Error, Result};

#[derive(Parser)]
#[command(name = "fcre", version, about = "Few-shot continual relation extraction experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct ConfigArgs {
    /// Experiment config (JSON).
    #[arg(long, short)]
    config: PathBuf,
    /// Override a config value, e.g. `--set methods.*.epochs=5`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<ExperimentConfig> {
        ExperimentConfig::load(&self.config, &self.overrides)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Write the task stream as per-task JSONL files plus a manifest.
    GenData {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pretrain the encoder with masked-token prediction.
    Pretrain {
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Run every configured method over every seed.
    Run {
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Summarize a results directory.
    Report { results: PathBuf },
    /// Export final-model features of one task's test set as CSV.
    DumpEmbeddings {
        results: PathBuf,
        #[arg(long)]
        task: usize,
        /// classifier or lm_head
        #[arg(long)]
        branch: String,
        #[arg(long)]
        method: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
        /// Write here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn execute(command: Command) -> Result<()> {
    match command {
        Command::GenData { config, out } => {
            let m = cli::cmd_gen_data(&config.load()?, &out)?;
            let train: usize = m.tasks.iter().map(|t| t.train_count).sum();
            let test: usize = m.tasks.iter().map(|t| t.test_count).sum();
            println!("{} tasks, {train} train / {test} test instances -> {}", m.tasks.len(), out.display());
        }
        Command::Pretrain { config } => {
            let cfg = config.load()?;
            let (_, curve) = cli::cmd_pretrain(&cfg)?;
            if let Some(last) = curve.last() {
                println!("epoch {}: loss {:.4}, accuracy {:.4}", last.epoch, last.loss, last.accuracy);
            }
            println!("checkpoint -> {}", cli::checkpoint_path(&cfg).display());
        }
        Command::Run { config } => {
            let summary = cli::cmd_run(&config.load()?)?;
            for a in &summary.aggregates {
                println!(
                    "{}: final {:.2} ± {:.2}, drop {:.2}",
                    a.method,
                    100.0 * a.final_acc.mean,
                    100.0 * a.final_acc.std,
                    100.0 * a.delta.mean
                );
            }
            println!("results -> {}", summary.dir.display());
        }
        Command::Report { results } => print!("{}", cli::cmd_report(&results)?.text),
        Command::DumpEmbeddings { results, task, branch, method, seed, out } => {
            let branch: Branch = branch.parse()?;
            let csv = cli::cmd_dump_embeddings(&results, task, branch, method.as_deref(), seed)?;
            match out {
                Some(p) => std::fs::write(&p, csv).map_err(|e| Error::Config(format!("cannot write {}: {e}", p.display())))?,
                None => print!("{csv}"),
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let args = Cli::parse();
    match execute(args.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_usage() { 2 } else { 1 })
        }
    }
}
