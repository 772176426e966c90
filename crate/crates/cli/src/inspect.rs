use std::fmt::Write as _;
use std::path::Path;

use eec_core::data::{ClassId, TaskId};
use eec_core::memory::{load_store, ConceptPair, MemoryStore};
use serde::Serialize;

use crate::error::{CliError, CliResult};

const F32: usize = 4;

#[derive(Debug, Serialize, PartialEq)]
pub struct ClassSummary {
    pub label: ClassId,
    pub task: TaskId,
    pub episodes: usize,
    pub pairs: usize,
    pub units: usize,
}

#[derive(Debug, Serialize, PartialEq)]
pub struct MemoryReport {
    pub latent_dim: usize,
    pub classes: Vec<ClassSummary>,
    pub episodes: usize,
    pub pairs: usize,
    pub units: usize,
    /// Bytes taken by episode embeddings and pair statistics.
    pub estimated_bytes: usize,
    pub checkpoints: usize,
    pub checkpoint_bytes: usize,
    pub file_bytes: u64,
}

impl MemoryReport {
    pub fn new(store: &MemoryStore<f32>, file_bytes: u64) -> Self {
        let dim = store.latent_dim();
        let classes: Vec<ClassSummary> = store
            .buckets()
            .map(|(label, b)| ClassSummary {
                label,
                task: b.task(),
                episodes: b.episodes().len(),
                pairs: b.pairs().len(),
                units: b.units(),
            })
            .collect();
        let (episodes, pairs) = (store.episode_count(), store.pair_count());
        // a pair stores centroid and variance plus its weight and task
        let pair_bytes = ConceptPair::<f32>::UNITS * dim * F32 + 8;
        Self {
            latent_dim: dim,
            episodes,
            pairs,
            units: store.memory_units(),
            estimated_bytes: episodes * dim * F32 + pairs * pair_bytes,
            checkpoints: store.checkpoints().len(),
            checkpoint_bytes: store.checkpoints().values().map(Vec::len).sum(),
            file_bytes,
            classes,
        }
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "latent dim      {}", self.latent_dim);
        let _ = writeln!(s, "memory units    {}", self.units);
        let _ = writeln!(s, "episodes        {}", self.episodes);
        let _ = writeln!(s, "concept pairs   {}", self.pairs);
        let _ = writeln!(s, "estimated bytes {}", self.estimated_bytes);
        let _ = writeln!(s, "checkpoints     {} ({} bytes)", self.checkpoints, self.checkpoint_bytes);
        let _ = writeln!(s, "file bytes      {}", self.file_bytes);
        if !self.classes.is_empty() {
            let _ = writeln!(s, "\nlabel  task  episodes  pairs  units");
            for c in &self.classes {
                let _ = writeln!(s, "{:>5}  {:>4}  {:>8}  {:>5}  {:>5}", c.label, c.task, c.episodes, c.pairs, c.units);
            }
        }
        s
    }
}

pub fn cmd_inspect_memory(path: &Path) -> CliResult<MemoryReport> {
    let file_bytes = std::fs::metadata(path).map_err(|e| CliError::io(path, e))?.len();
    let store = load_store(path).map_err(|e| match e {
        eec_core::Error::Io(io) if io.kind() == std::io::ErrorKind::UnexpectedEof => {
            CliError::Integrity(format!("{}: truncated store: {io}", path.display()))
        }
        other => other.into(),
    })?;
    Ok(MemoryReport::new(&store, file_bytes))
}
