use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use eec_cli::fetch::{cmd_fetch, FetchArgs};
use eec_cli::inspect::cmd_inspect_memory;
use eec_cli::run::{cmd_run, RunArgs};
use eec_cli::synth::{cmd_gen_synthetic, SynthArgs};
use eec_cli::{CliError, CliResult};

/// Class-incremental learning experiments with condensed episodic memory.
#[derive(Parser)]
#[command(name = "eec", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the configured experiment and write reports.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Output directory (overrides `output_dir`).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Base seed (overrides `seed`).
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Summarise a saved memory store.
    InspectMemory {
        store: PathBuf,
        /// Print JSON instead of text.
        #[arg(long)]
        json: bool,
    },
    /// Download a dataset and verify it against the shipped checksums.
    Fetch {
        #[arg(default_value = "mnist")]
        dataset: String,
        #[arg(long, default_value = "data/mnist")]
        dir: PathBuf,
        /// Base URL or local directory holding the files (optionally gzipped).
        #[arg(long)]
        source: Option<String>,
        /// Alternative `sha256sum`-style manifest.
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Write a synthetic glyph dataset as IDX files.
    GenSynthetic {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 6)]
        classes: usize,
        #[arg(long, default_value_t = 200)]
        per_class: usize,
        #[arg(long, default_value_t = 32)]
        size: usize,
        #[arg(long, default_value_t = 0.1)]
        noise: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn execute(command: Command) -> CliResult<()> {
    match command {
        Command::Run { config, out, seed } => {
            let summary = cmd_run(&RunArgs { config, out, seed })?;
            if let (Some(mean), Some(std)) = (summary.average_accuracy.mean, summary.average_accuracy.std) {
                println!(
                    "average incremental accuracy over {} increments: {mean:.4} (std {std:.4}, {} runs)",
                    summary.increments, summary.average_accuracy.runs
                );
            }
        }
        Command::InspectMemory { store, json } => {
            let report = cmd_inspect_memory(&store)?;
            if json {
                let text = serde_json::to_string_pretty(&report).map_err(|e| CliError::Runtime(e.to_string()))?;
                println!("{text}");
            } else {
                print!("{}", report.to_text());
            }
        }
        Command::Fetch {
            dataset,
            dir,
            source,
            manifest,
        } => {
            let report = cmd_fetch(&FetchArgs {
                dataset,
                dir,
                source,
                manifest,
            })?;
            println!("{} fetched, {} already present", report.fetched.len(), report.present.len());
        }
        Command::GenSynthetic {
            out,
            classes,
            per_class,
            size,
            noise,
            seed,
        } => {
            for path in cmd_gen_synthetic(&SynthArgs {
                out,
                classes,
                per_class,
                size,
                noise,
                seed,
            })? {
                println!("{}", path.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
