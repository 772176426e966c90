//! Per-run and aggregate report files.
//!
//! `results.csv` has one row per finished increment. Columns, in order:
//! `increment`, `new_classes` (space separated), `overall_acc`,
//! `memory_units`, then `acc_<label>` for every class of the dataset in
//! ascending label order, left empty until that class has been seen.
//! Accuracies are fractions printed with six decimals.

use std::collections::BTreeMap;
use std::path::Path;

use eec_core::data::{ClassId, LabeledDataset};
use eec_core::trainer::{ExperimentOutcome, IncrementReport};
use image::GrayImage;
use serde::Serialize;

use crate::error::{CliError, CliResult};

pub const FIXED_COLUMNS: [&str; 4] = ["increment", "new_classes", "overall_acc", "memory_units"];

pub fn results_header(classes: &[ClassId]) -> Vec<String> {
    FIXED_COLUMNS
        .iter()
        .map(|s| s.to_string())
        .chain(classes.iter().map(|c| format!("acc_{c}")))
        .collect()
}

fn results_row(report: &IncrementReport, classes: &[ClassId]) -> Vec<String> {
    let new: Vec<String> = report.new_classes.iter().map(|c| c.to_string()).collect();
    let mut row = vec![
        report.increment.to_string(),
        new.join(" "),
        format!("{:.6}", report.overall_accuracy),
        report.memory_units.to_string(),
    ];
    row.extend(
        classes
            .iter()
            .map(|c| report.per_class_accuracy.get(c).map(|a| format!("{a:.6}")).unwrap_or_default()),
    );
    row
}

pub fn write_results_csv(path: &Path, reports: &[IncrementReport], classes: &[ClassId]) -> CliResult<()> {
    let csv_err = |e: csv::Error| CliError::Runtime(format!("{}: {e}", path.display()));
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(results_header(classes)).map_err(csv_err)?;
    for r in reports {
        w.write_record(results_row(r, classes)).map_err(csv_err)?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

#[derive(Debug, Serialize)]
pub struct RunSummary {
    pub run: usize,
    pub seed: u64,
    pub complete: bool,
    pub error: Option<String>,
    pub class_order: Vec<ClassId>,
    pub accuracies: Vec<f64>,
    pub average_accuracy: Option<f64>,
    pub peak_memory_units: usize,
    pub pseudo_retained: usize,
    pub pseudo_agreeing: usize,
}

impl RunSummary {
    pub fn new(run: usize, outcome: &ExperimentOutcome) -> Self {
        let increments = outcome.schedule.num_tasks();
        Self {
            run,
            seed: outcome.seed,
            complete: outcome.complete,
            error: outcome.error.as_ref().map(|e| e.to_string()),
            class_order: outcome.schedule.class_order(),
            accuracies: outcome.accuracies(),
            average_accuracy: if outcome.complete { outcome.average_accuracy(increments) } else { None },
            peak_memory_units: outcome.peak_memory_units,
            pseudo_retained: outcome.pseudo_audit.retained,
            pseudo_agreeing: outcome.pseudo_audit.agreeing,
        }
    }
}

#[derive(Debug, Serialize, PartialEq)]
pub struct Aggregate {
    /// Number of complete runs contributing.
    pub runs: usize,
    pub mean: Option<f64>,
    /// Population standard deviation.
    pub std: Option<f64>,
}

pub fn aggregate(values: &[f64]) -> Aggregate {
    if values.is_empty() {
        return Aggregate {
            runs: 0,
            mean: None,
            std: None,
        };
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    Aggregate {
        runs: values.len(),
        mean: Some(mean),
        std: Some(var.sqrt()),
    }
}

#[derive(Debug, Serialize)]
pub struct Summary {
    pub dataset: String,
    pub variant: String,
    pub increments: usize,
    pub average_accuracy: Aggregate,
    pub runs: Vec<RunSummary>,
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::Runtime(e.to_string()))?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| CliError::io(path, e))
}

/// One row per class (in order of first appearance), one column per image,
/// separated by a one-pixel black border.
pub fn image_grid(images: &LabeledDataset) -> Option<GrayImage> {
    if images.is_empty() {
        return None;
    }
    let [_, _, h, w] = images.images.shape();
    let mut rows: Vec<(ClassId, Vec<usize>)> = Vec::new();
    let mut row_of = BTreeMap::new();
    for (i, &label) in images.labels.iter().enumerate() {
        let r = *row_of.entry(label).or_insert_with(|| {
            rows.push((label, Vec::new()));
            rows.len() - 1
        });
        rows[r].1.push(i);
    }
    let cols = rows.iter().map(|r| r.1.len()).max().unwrap_or(0);
    let (gw, gh) = ((cols * (w + 1) + 1) as u32, (rows.len() * (h + 1) + 1) as u32);
    let mut grid = GrayImage::new(gw, gh);
    for (r, (_, items)) in rows.iter().enumerate() {
        for (c, &i) in items.iter().enumerate() {
            // single-channel images: the item is h * w pixels
            let pixels = images.images.item(i);
            for y in 0..h {
                for x in 0..w {
                    let v = (pixels[y * w + x].clamp(0.0, 1.0) * 255.0).round() as u8;
                    let (px, py) = (c * (w + 1) + 1 + x, r * (h + 1) + 1 + y);
                    grid.put_pixel(px as u32, py as u32, image::Luma([v]));
                }
            }
        }
    }
    Some(grid)
}
