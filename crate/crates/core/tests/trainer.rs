mod common;

use std::collections::BTreeSet;

use eec_core::config::ExperimentConfig;
use eec_core::data::LabeledDataset;
use eec_core::memory::SHARED_AUTOENCODER;
use eec_core::nn::cross_entropy_per_sample;
use eec_core::rehearsal::{ReplayBatch, ReplayStream};
use eec_core::trainer::{
    average_incremental_accuracy, composite_check, evaluate_single_headed, load_experiment_data, run_experiment,
    train_increment, ClassifierTrainConfig, IncrementPlan, WeightedReplay,
};
use eec_core::Error;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn replay(data: &LabeledDataset, task: u32, stream: ReplayStream, weight: f64) -> WeightedReplay {
    WeightedReplay {
        batch: ReplayBatch {
            images: data.images.clone(),
            labels: data.labels.clone(),
            stream,
            task,
        },
        weight,
    }
}

/// Classes 0 and 1 replayed (task 0), class 2 real (task 1).
fn mixed_plan(w_r: f64, w_p: f64) -> IncrementPlan {
    let (train, _) = common::synthetic(&[0, 1, 2], 12, 16, 1);
    let old = train.filter_classes(&[0, 1]);
    IncrementPlan {
        task: 1,
        old_class_count: 2,
        real: train.filter_classes(&[2]),
        replay: vec![
            replay(&old.subset(&(0..14).collect::<Vec<_>>()), 0, ReplayStream::Reconstructed, w_r),
            replay(&old.subset(&(14..24).collect::<Vec<_>>()), 0, ReplayStream::Pseudo, w_p),
        ],
    }
}

fn all_picks(plan: &IncrementPlan) -> Vec<(usize, usize)> {
    plan.source_sizes()
        .iter()
        .enumerate()
        .flat_map(|(s, &n)| (0..n).map(move |i| (s, i)))
        .collect()
}

#[test]
fn plan_validation() {
    assert!(mixed_plan(0.5, 0.25).validate().is_ok());
    let invalid = |p: IncrementPlan| matches!(p.validate(), Err(Error::InvalidPlan(_)));

    let mut p = mixed_plan(1.0, 1.0);
    p.real = p.real.subset(&[]);
    assert!(invalid(p));
    assert!(invalid(mixed_plan(0.0, 1.0)));
    assert!(invalid(mixed_plan(1.0, 1.5)));
    let mut p = mixed_plan(1.0, 1.0);
    p.replay[0].batch.task = 1;
    assert!(invalid(p));
    // a real image of an old class is never allowed
    let mut p = mixed_plan(1.0, 1.0);
    p.real = p.replay[0].batch.clone().into_dataset();
    assert!(invalid(p));
    let mut p = mixed_plan(1.0, 1.0);
    p.replay[1].batch.labels[0] = 2;
    assert!(invalid(p));
}

trait IntoDataset {
    fn into_dataset(self) -> LabeledDataset;
}

impl IntoDataset for ReplayBatch {
    fn into_dataset(self) -> LabeledDataset {
        LabeledDataset::new(self.images, self.labels, eec_core::data::Split::Train).unwrap()
    }
}

#[test]
fn composite_loss_decomposes_into_stream_terms() {
    let plan = mixed_plan((-0.4f64).exp(), (-0.8f64).exp());
    let clf = common::classifier(16, 3, 5);
    let mut picks = all_picks(&plan);
    picks.shuffle(&mut ChaCha8Rng::seed_from_u64(3));
    for batch in picks.chunks(9) {
        let check = composite_check(&clf, &plan, batch).unwrap();
        // independent recomputation: each stream on its own, weighted, summed
        let mut total = 0.0f64;
        for s in 0..3 {
            let idx: Vec<(usize, usize)> = batch.iter().copied().filter(|p| p.0 == s).collect();
            if idx.is_empty() {
                continue;
            }
            let (x, labels, _) = plan.gather(&idx).unwrap();
            let ce = cross_entropy_per_sample(&clf.forward(&x).unwrap(), &labels).unwrap();
            let weight = if s == 0 { 1.0 } else { plan.replay[s - 1].weight };
            total += weight * ce.iter().map(|v| *v as f64).sum::<f64>();
        }
        let recombined = total / batch.len() as f64;
        assert!((check.batch_loss - recombined).abs() < 1e-5, "{} vs {recombined}", check.batch_loss);
        assert!(check.gap() < 1e-5);
    }
}

#[test]
fn unit_weights_equal_unweighted_concatenation() {
    let plan = mixed_plan(1.0, 1.0);
    let clf = common::classifier(16, 3, 6);
    let picks = all_picks(&plan);
    let check = composite_check(&clf, &plan, &picks).unwrap();
    let (x, labels, weights) = plan.gather(&picks).unwrap();
    assert!(weights.iter().all(|&w| w == 1.0));
    let ce = cross_entropy_per_sample(&clf.forward(&x).unwrap(), &labels).unwrap();
    let mean = ce.iter().map(|v| *v as f64).sum::<f64>() / ce.len() as f64;
    assert!((check.batch_loss - mean).abs() < 1e-6);
}

#[test]
fn training_respects_audits_and_schedule() {
    let plan = mixed_plan(0.8, 0.5);
    let mut clf = common::classifier(16, 3, 7);
    let cfg = ClassifierTrainConfig {
        epochs: 5,
        learning_rate: 1e-3,
        batch_size: 8,
    };
    assert_eq!(cfg.decay_epoch(), 4);
    let trace = train_increment(&mut clf, &plan, &cfg, 1).unwrap();
    assert_eq!(trace.epoch_losses.len(), 5);
    assert_eq!(trace.steps, 5 * plan.len().div_ceil(8) as u64);
    assert!(trace.max_composite_gap < 1e-5);
    assert!(trace.epoch_losses.last() < trace.epoch_losses.first());

    let mut again = common::classifier(16, 3, 7);
    assert_eq!(train_increment(&mut again, &plan, &cfg, 1).unwrap(), trace);
    assert_eq!(again, clf);

    // the head must already cover every label
    let mut small = common::classifier(16, 2, 7);
    assert!(matches!(
        train_increment(&mut small, &plan, &cfg, 1),
        Err(Error::InvalidLabel { .. })
    ));
}

#[test]
fn single_headed_evaluation() {
    let (_, test) = common::synthetic(&(0..10).collect::<Vec<_>>(), 6, 16, 2);
    let mut constant = common::classifier(16, 10, 0);
    constant.zero_head();
    let e = evaluate_single_headed(&constant, &test, 10).unwrap();
    assert!((e.overall - 0.1).abs() < 1e-12);
    assert_eq!(e.per_class[&0], 1.0);
    assert_eq!(e.per_class[&9], 0.0);

    let only_zero = test.filter_classes(&[0]);
    assert_eq!(evaluate_single_headed(&constant, &only_zero, 10).unwrap().overall, 1.0);

    let (train, test) = common::synthetic(&[0, 1, 2, 3], 20, 16, 2);
    let clf = common::trained_classifier(&train, 4, 2);
    let e = evaluate_single_headed(&clf, &test, 4).unwrap();
    let mut correct = 0;
    for i in 0..test.len() {
        let logits = clf.forward(&test.images.select(&[i])).unwrap();
        let row = logits.row(0);
        let mut best = 0;
        for c in 1..4 {
            if row[c] > row[best] {
                best = c;
            }
        }
        correct += usize::from(best == test.labels[i] as usize);
    }
    assert_eq!(e.correct, correct);
    assert!((e.overall - correct as f64 / test.len() as f64).abs() < 1e-12);
    assert!(evaluate_single_headed(&clf, &test, 3).is_err());
}

#[test]
fn average_accuracy_examples() {
    assert!((average_incremental_accuracy(&[0.9, 0.8]).unwrap() - 0.85).abs() < 1e-12);
    assert_eq!(average_incremental_accuracy(&[0.42]).unwrap(), 0.42);
    assert!((average_incremental_accuracy(&[0.7; 6]).unwrap() - 0.7).abs() < 1e-12);
    assert!(matches!(average_incremental_accuracy(&[]), Err(Error::InvalidInput(_))));
}

fn small_config(variant: &str, extra: &str) -> ExperimentConfig {
    ExperimentConfig::from_json_str(&format!(
        r#"{{"dataset": "synthetic", "variant": "{variant}", "synthetic_classes": 6,
            "synthetic_per_class": 40, "synthetic_image_size": 16, "classes_per_increment": 2,
            "classifier_epochs": 4, "autoencoder_epochs": 4, "classifier_batch_size": 16,
            "autoencoder_batch_size": 16, "classifier_width": 8 {extra}}}"#
    ))
    .unwrap()
}

#[test]
fn runs_are_deterministic() {
    let cfg = small_config("eec", r#", "budget": 200"#);
    let data = load_experiment_data(&cfg).unwrap();
    let a = run_experiment(&cfg, &data, 4);
    let b = run_experiment(&cfg, &data, 4);
    assert!(a.complete, "{:?}", a.error);
    assert_eq!(a.reports.len(), 3);
    for (x, y) in a.reports.iter().zip(&b.reports) {
        let mut y = y.clone();
        y.wall_s = x.wall_s;
        assert_eq!(x, &y);
    }
    let (sa, sb) = (a.store.unwrap(), b.store.unwrap());
    assert_eq!(sa.to_bytes().unwrap(), sb.to_bytes().unwrap());
    assert_eq!(a.reconstructions, b.reconstructions);
    assert!(sa.memory_units() <= 200);
    assert_eq!(a.pseudo_audit.retained, a.pseudo_audit.agreeing);
}

#[test]
fn single_increment_run_has_no_replay() {
    let cfg = small_config("eec", r#", "classes_per_increment": 6"#);
    let data = load_experiment_data(&cfg).unwrap();
    let out = run_experiment(&cfg, &data, 1);
    assert!(out.complete);
    assert_eq!(out.reports.len(), 1);
    let r = &out.reports[0];
    assert_eq!(r.per_class_accuracy.len(), 6);
    assert_eq!(r.replay, Default::default());
}

#[test]
fn registry_checkpoints_per_variant() {
    let data = load_experiment_data(&small_config("eec", "")).unwrap();
    let eec = run_experiment(&small_config("eec", ""), &data, 2);
    let keys: BTreeSet<u32> = eec.store.unwrap().checkpoints().keys().copied().collect();
    assert_eq!(keys, BTreeSet::from([0, 1, 2]));
    let eecs = run_experiment(&small_config("eecs", ""), &data, 2);
    assert!(eecs.complete, "{:?}", eecs.error);
    let keys: BTreeSet<u32> = eecs.store.unwrap().checkpoints().keys().copied().collect();
    assert_eq!(keys, BTreeSet::from([SHARED_AUTOENCODER]));
}

#[test]
fn replay_protects_first_increment_classes() {
    let mut eec_first = Vec::new();
    let mut ft_first = Vec::new();
    for seed in 0..3 {
        let eec_cfg = small_config("eec", "");
        let data = load_experiment_data(&eec_cfg).unwrap();
        let first_classes = |o: &eec_core::trainer::ExperimentOutcome| {
            let last = o.reports.last().unwrap();
            o.reports[0]
                .new_classes
                .iter()
                .map(|c| last.per_class_accuracy[c])
                .sum::<f64>()
                / 2.0
        };
        eec_first.push(first_classes(&run_experiment(&eec_cfg, &data, seed)));
        ft_first.push(first_classes(&run_experiment(&small_config("finetune-baseline", ""), &data, seed)));
    }
    let (e, f) = (eec_first.iter().sum::<f64>(), ft_first.iter().sum::<f64>());
    assert!(e >= 2.0 * f && e > 0.0, "eec {eec_first:?} vs fine-tuning {ft_first:?}");
}

#[test]
fn failure_keeps_finished_increments() {
    // 80 incoming fit, but two old classes cannot shrink below 2 units each
    // into the single unit left at increment 2
    let cfg = small_config("eec", r#", "budget": 81"#);
    let data = load_experiment_data(&cfg).unwrap();
    let out = run_experiment(&cfg, &data, 0);
    assert!(!out.complete);
    assert_eq!(out.reports.len(), 1);
    assert!(matches!(out.error, Some(Error::BudgetInfeasible(_))), "{:?}", out.error);

    let out = run_experiment(&small_config("exemplar-baseline", ""), &data, 0);
    assert!(out.complete);
    assert_eq!(out.reports.last().unwrap().memory_units, 120);
}
