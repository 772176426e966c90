use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use eec_core::memory::save_store;
use eec_core::trainer::{load_experiment_data, run_experiment};
use eec_core::{parse_config, ExperimentConfig};

use crate::error::{CliError, CliResult};
use crate::report::{aggregate, image_grid, write_json, write_results_csv, RunSummary, Summary};

pub const DEFAULT_OUT: &str = "runs";

pub struct RunArgs {
    pub config: PathBuf,
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
}

pub fn load_config(path: &Path, seed: Option<u64>) -> CliResult<ExperimentConfig> {
    let mut cfg = parse_config(path).map_err(|e| match e {
        eec_core::Error::Io(io) => CliError::Config(format!("cannot read config {}: {io}", path.display())),
        other => other.into(),
    })?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn label(value: &impl serde::Serialize) -> String {
    serde_json::to_value(value)
        .ok()
        .and_then(|v| v.as_str().map(str::to_string))
        .unwrap_or_default()
}

/// Runs every repeat and writes the artifacts. Returns the summary even when
/// some runs failed; the caller turns failures into an exit status.
pub fn cmd_run(args: &RunArgs) -> CliResult<Summary> {
    let cfg = load_config(&args.config, args.seed)?;
    let out = args
        .out
        .clone()
        .or_else(|| cfg.output_dir.clone())
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT));
    fs::create_dir_all(&out).map_err(|e| CliError::io(&out, e))?;
    write_json(&out.join("config.json"), &cfg)?;

    let data = load_experiment_data(&cfg)?;
    let classes = data.train.classes();
    let mut timings = String::new();
    let mut runs = Vec::new();
    let mut increments = 0;
    let mut failure = None;
    for r in 0..cfg.repeats {
        let seed = cfg.seed + r as u64;
        eprintln!("run {}/{} (seed {seed})", r + 1, cfg.repeats);
        let outcome = run_experiment(&cfg, &data, seed);
        increments = increments.max(outcome.schedule.num_tasks());

        let dir = out.join(format!("run-{r}"));
        fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
        write_results_csv(&dir.join("results.csv"), &outcome.reports, &classes)?;
        for rep in &outcome.reports {
            eprintln!(
                "  increment {}: accuracy {:.4}, memory units {}",
                rep.increment, rep.overall_accuracy, rep.memory_units
            );
            let _ = writeln!(timings, "run {r} seed {seed} increment {} wall_s {:.3}", rep.increment, rep.wall_s);
        }
        if let Some(store) = &outcome.store {
            save_store(store, &dir.join("memory.eecm"))?;
        }
        if let Some(grid) = outcome.reconstructions.as_ref().and_then(image_grid) {
            let path = dir.join("reconstructions.png");
            grid.save(&path).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
        }
        if let Some(e) = &outcome.error {
            eprintln!("  run {r} failed: {e}");
            failure.get_or_insert_with(|| format!("run {r} (seed {seed}) failed: {e}"));
        }
        runs.push(RunSummary::new(r, &outcome));
    }
    let timings_path = out.join("timings.log");
    fs::write(&timings_path, timings).map_err(|e| CliError::io(&timings_path, e))?;

    let finished: Vec<f64> = runs.iter().filter_map(|r| r.average_accuracy).collect();
    let summary = Summary {
        dataset: label(&cfg.dataset),
        variant: label(&cfg.variant),
        increments,
        average_accuracy: aggregate(&finished),
        runs,
    };
    write_json(&out.join("summary.json"), &summary)?;
    match failure {
        Some(msg) => Err(CliError::Runtime(msg)),
        None => Ok(summary),
    }
}
