//! Labeled image datasets: MNIST IDX ingestion, synthetic glyph datasets and
//! class-incremental task scheduling.

mod idx;
mod schedule;
mod synthetic;

pub use idx::{
    load_mnist_idx, load_mnist_split, pad_to_32, parse_idx_images, parse_idx_labels, write_idx,
    IdxImages, IMAGES_MAGIC, LABELS_MAGIC,
};
pub use schedule::{split_class_incremental, TaskSchedule};
pub use synthetic::{glyph, make_synthetic};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::ImageBatch;

pub type ClassId = u32;
pub type TaskId = u32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    pub images: ImageBatch,
    pub labels: Vec<ClassId>,
    pub split: Split,
}

impl LabeledDataset {
    pub fn new(images: ImageBatch, labels: Vec<ClassId>, split: Split) -> Result<Self> {
        if images.count() != labels.len() {
            return Err(Error::Consistency(format!(
                "{} images but {} labels",
                images.count(),
                labels.len()
            )));
        }
        Ok(Self {
            images,
            labels,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Sorted distinct labels.
    pub fn classes(&self) -> Vec<ClassId> {
        let mut c = self.labels.clone();
        c.sort_unstable();
        c.dedup();
        c
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            images: self.images.select(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            split: self.split,
        }
    }

    /// Samples whose label is in `classes`, in original order.
    pub fn filter_classes(&self, classes: &[ClassId]) -> Self {
        let idx: Vec<usize> = (0..self.len())
            .filter(|&i| classes.contains(&self.labels[i]))
            .collect();
        self.subset(&idx)
    }

    /// Keeps at most `limit` samples per class (the first ones encountered).
    pub fn limit_per_class(&self, limit: usize) -> Self {
        let mut seen = std::collections::BTreeMap::<ClassId, usize>::new();
        let idx: Vec<usize> = (0..self.len())
            .filter(|&i| {
                let n = seen.entry(self.labels[i]).or_default();
                *n += 1;
                *n <= limit
            })
            .collect();
        self.subset(&idx)
    }
}
