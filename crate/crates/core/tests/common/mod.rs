#![allow(dead_code)]

pub mod grad;
pub mod store;

use eec_core::data::{make_synthetic, LabeledDataset};
use eec_core::nn::{Classifier, ClassifierSpec};
use eec_core::trainer::{train_increment, ClassifierTrainConfig, IncrementPlan};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Synthetic train/test split restricted to `classes`, labels unchanged.
pub fn synthetic(classes: &[u32], per_class: usize, size: usize, seed: u64) -> (LabeledDataset, LabeledDataset) {
    let n = *classes.iter().max().unwrap() as usize + 1;
    let (train, test) = make_synthetic(n, per_class, size, 0.1, seed).unwrap();
    (train.filter_classes(classes), test.filter_classes(classes))
}

pub fn classifier(size: usize, num_classes: usize, seed: u64) -> Classifier<f32> {
    let spec = ClassifierSpec {
        in_channels: 1,
        image_size: size,
        width: 8,
    };
    Classifier::new(spec, num_classes, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

/// A small classifier fitted to `data` (labels must be below `num_classes`).
pub fn trained_classifier(data: &LabeledDataset, num_classes: usize, seed: u64) -> Classifier<f32> {
    let [_, _, size, _] = data.images.shape();
    let mut clf = classifier(size, num_classes, seed);
    let plan = IncrementPlan {
        task: 0,
        old_class_count: 0,
        real: data.clone(),
        replay: Vec::new(),
    };
    let cfg = ClassifierTrainConfig {
        epochs: 4,
        learning_rate: 1e-3,
        batch_size: 32,
    };
    train_increment(&mut clf, &plan, &cfg, seed).unwrap();
    clf
}
