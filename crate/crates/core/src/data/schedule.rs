use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{ClassId, LabeledDataset, TaskId};
use crate::error::{Error, Result};

/// Ordered, disjoint class groups; group `t` is presented at increment `t`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSchedule {
    pub groups: Vec<Vec<ClassId>>,
    pub order_seed: u64,
}

impl TaskSchedule {
    pub fn num_tasks(&self) -> usize {
        self.groups.len()
    }

    pub fn task_of(&self, class: ClassId) -> Option<TaskId> {
        self.groups
            .iter()
            .position(|g| g.contains(&class))
            .map(|t| t as TaskId)
    }

    /// Classes in presentation order.
    pub fn class_order(&self) -> Vec<ClassId> {
        self.groups.iter().flatten().copied().collect()
    }

    /// Applies the schedule to another dataset (e.g. the test split).
    pub fn partition(&self, dataset: &LabeledDataset) -> Vec<LabeledDataset> {
        self.groups.iter().map(|g| dataset.filter_classes(g)).collect()
    }
}

/// Splits a dataset into class-incremental tasks. Class order is a seeded
/// permutation; when `classes_per_increment` does not divide the class count
/// the last group is smaller.
pub fn split_class_incremental(
    dataset: &LabeledDataset,
    classes_per_increment: usize,
    order_seed: u64,
) -> Result<(TaskSchedule, Vec<LabeledDataset>)> {
    if classes_per_increment < 1 {
        return Err(Error::config("classes_per_increment", "must be at least 1"));
    }
    let mut classes = dataset.classes();
    classes.shuffle(&mut ChaCha8Rng::seed_from_u64(order_seed));
    let schedule = TaskSchedule {
        groups: classes.chunks(classes_per_increment).map(<[_]>::to_vec).collect(),
        order_seed,
    };
    let tasks = schedule.partition(dataset);
    Ok((schedule, tasks))
}
