use std::fs;
use std::path::PathBuf;

use eec_core::data::{make_synthetic, write_idx};

use crate::error::{CliError, CliResult};

pub struct SynthArgs {
    pub out: PathBuf,
    pub classes: usize,
    pub per_class: usize,
    pub size: usize,
    pub noise: f64,
    pub seed: u64,
}

/// Writes train and test splits under the MNIST file names, so the output
/// directory can stand in for `mnist_dir`.
pub fn cmd_gen_synthetic(args: &SynthArgs) -> CliResult<Vec<PathBuf>> {
    let (train, test) = make_synthetic(args.classes, args.per_class, args.size, args.noise, args.seed)
        .map_err(|e| CliError::Config(e.to_string()))?;
    fs::create_dir_all(&args.out).map_err(|e| CliError::io(&args.out, e))?;
    let mut written = Vec::new();
    for (prefix, ds) in [("train", &train), ("t10k", &test)] {
        let images = args.out.join(format!("{prefix}-images-idx3-ubyte"));
        let labels = args.out.join(format!("{prefix}-labels-idx1-ubyte"));
        write_idx(ds, &images, &labels)?;
        written.extend([images, labels]);
    }
    Ok(written)
}
