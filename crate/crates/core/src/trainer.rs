//! Classifier training per increment on real data mixed with weighted replay,
//! single-headed evaluation, and the full experiment loop.
//!
//! Inside an experiment, classes are renumbered to their position in the
//! presentation order, so the classes seen after increment `t` are exactly
//! the ordinals below some count and the classifier head only ever grows.
//! Reports translate back to the dataset's own labels.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autoencoder::{
    encode_task, mixture_schedule, retrain_shared_autoencoder, train_task_autoencoder, AutoencoderSharing,
    TaskAutoencoderRegistry,
};
use crate::config::{DatasetKind, ExperimentConfig, Variant};
use crate::data::{
    load_mnist_split, make_synthetic, pad_to_32, split_class_incremental, ClassId, LabeledDataset, Split,
    TaskId, TaskSchedule,
};
use crate::error::{Error, Result};
use crate::memory::{MemoryStore, SHARED_AUTOENCODER};
use crate::nn::{
    cross_entropy_per_sample, weighted_cross_entropy, Adam, Autoencoder, AutoencoderSpec, Classifier,
    ClassifierSpec, Parameters,
};
use crate::rehearsal::{generate_with_retry, reconstruct_task, DecayConfig, ReplayBatch, ReplayStream};
use crate::seed::derive_seed;
use crate::tensor::Tensor4;

/// Fraction of the epochs after which the learning rate drops.
pub const LR_DECAY_AT: f64 = 0.8;
pub const LR_DECAY_FACTOR: f64 = 0.1;

const RECONSTRUCTIONS_PER_CLASS: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ClassifierTrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
}

impl ClassifierTrainConfig {
    /// First epoch trained at the decayed rate.
    pub fn decay_epoch(&self) -> usize {
        (self.epochs as f64 * LR_DECAY_AT).ceil() as usize
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct WeightedReplay {
    pub batch: ReplayBatch,
    /// Loss multiplier applied to every sample of the batch.
    pub weight: f64,
}

/// Training data for one increment. Labels are ordinals: classes below
/// `old_class_count` belong to earlier tasks.
#[derive(Clone, Debug, PartialEq)]
pub struct IncrementPlan {
    pub task: TaskId,
    pub old_class_count: usize,
    pub real: LabeledDataset,
    pub replay: Vec<WeightedReplay>,
}

impl IncrementPlan {
    pub fn validate(&self) -> Result<()> {
        if self.real.is_empty() {
            return Err(Error::InvalidPlan(format!("task {} has no real data", self.task)));
        }
        if let Some(&l) = self.real.labels.iter().find(|&&l| (l as usize) < self.old_class_count) {
            return Err(Error::InvalidPlan(format!(
                "real image of old class {l} in the plan for task {}",
                self.task
            )));
        }
        let shape = self.real.images.shape();
        for r in &self.replay {
            if !(r.weight.is_finite() && r.weight > 0.0 && r.weight <= 1.0) {
                return Err(Error::InvalidPlan(format!("replay weight {} outside (0, 1]", r.weight)));
            }
            if r.batch.task >= self.task {
                return Err(Error::InvalidPlan(format!(
                    "replay of task {} does not precede task {}",
                    r.batch.task, self.task
                )));
            }
            if r.batch.images.count() != r.batch.labels.len() {
                return Err(Error::InvalidPlan("replay images and labels differ in count".into()));
            }
            if !r.batch.is_empty() && r.batch.images.shape()[1..] != shape[1..] {
                return Err(Error::InvalidPlan(format!(
                    "replay image shape {:?} differs from {:?}",
                    r.batch.images.shape(),
                    shape
                )));
            }
            if let Some(&l) = r.batch.labels.iter().find(|&&l| (l as usize) >= self.old_class_count) {
                return Err(Error::InvalidPlan(format!("replay carries non-old class {l}")));
            }
        }
        Ok(())
    }

    /// Source 0 is the real data, source `k > 0` is `replay[k - 1]`.
    pub fn source_sizes(&self) -> Vec<usize> {
        std::iter::once(self.real.len())
            .chain(self.replay.iter().map(|r| r.batch.len()))
            .collect()
    }

    pub fn len(&self) -> usize {
        self.source_sizes().iter().sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn source(&self, s: usize) -> (&Tensor4<f32>, &[ClassId], f64) {
        if s == 0 {
            (&self.real.images, &self.real.labels, 1.0)
        } else {
            let r = &self.replay[s - 1];
            (&r.batch.images, &r.batch.labels, r.weight)
        }
    }

    /// Images, labels and per-sample weights for `(source, index)` picks.
    pub fn gather(&self, picks: &[(usize, usize)]) -> Result<(Tensor4<f32>, Vec<usize>, Vec<f32>)> {
        let [_, c, h, w] = self.real.images.shape();
        let mut data = Vec::with_capacity(picks.len() * c * h * w);
        let mut labels = Vec::with_capacity(picks.len());
        let mut weights = Vec::with_capacity(picks.len());
        for &(s, i) in picks {
            let (images, ls, weight) = self.source(s);
            data.extend_from_slice(images.item(i));
            labels.push(ls[i] as usize);
            weights.push(weight as f32);
        }
        Ok((Tensor4::from_vec([picks.len(), c, h, w], data)?, labels, weights))
    }
}

/// One stream's share of a mixed batch, recomputed on its own.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct StreamTerm {
    pub source: usize,
    pub weight: f64,
    pub count: usize,
    /// Unweighted sum of per-sample cross-entropies.
    pub ce_sum: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CompositeCheck {
    /// Loss of the mixed batch as used for training.
    pub batch_loss: f64,
    pub terms: Vec<StreamTerm>,
}

impl CompositeCheck {
    /// `sum_s weight_s * ce_sum_s / n` over the batch's `n` samples.
    pub fn recombined(&self) -> f64 {
        let n: usize = self.terms.iter().map(|t| t.count).sum();
        self.terms.iter().map(|t| t.weight * t.ce_sum).sum::<f64>() / n.max(1) as f64
    }

    pub fn gap(&self) -> f64 {
        (self.batch_loss - self.recombined()).abs()
    }
}

/// Evaluates the mixed-batch loss and, separately, each stream's samples of
/// the same batch through their own forward pass.
pub fn composite_check(
    classifier: &Classifier<f32>,
    plan: &IncrementPlan,
    picks: &[(usize, usize)],
) -> Result<CompositeCheck> {
    let (x, labels, weights) = plan.gather(picks)?;
    let (batch_loss, _) = weighted_cross_entropy(&classifier.forward(&x)?, &labels, &weights)?;
    let mut by_source: BTreeMap<usize, Vec<(usize, usize)>> = BTreeMap::new();
    for &p in picks {
        by_source.entry(p.0).or_default().push(p);
    }
    let mut terms = Vec::new();
    for (source, sub) in by_source {
        let (xs, ls, _) = plan.gather(&sub)?;
        let ce = cross_entropy_per_sample(&classifier.forward(&xs)?, &ls)?;
        terms.push(StreamTerm {
            source,
            weight: plan.source(source).2,
            count: sub.len(),
            ce_sum: ce.iter().map(|v| *v as f64).sum(),
        });
    }
    Ok(CompositeCheck {
        batch_loss: batch_loss as f64,
        terms,
    })
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct TrainTrace {
    /// Mean weighted loss over each epoch's batches.
    pub epoch_losses: Vec<f64>,
    pub steps: u64,
    /// Largest decomposition gap over the audited batches (the first batch
    /// of every epoch).
    pub max_composite_gap: f64,
}

/// Trains on `plan` with shuffled mixed batches carrying per-sample weights
/// (1 for real data, the replay weight otherwise). A fresh Adam is used and
/// its rate drops by [`LR_DECAY_FACTOR`] from [`ClassifierTrainConfig::decay_epoch`].
pub fn train_increment(
    classifier: &mut Classifier<f32>,
    plan: &IncrementPlan,
    cfg: &ClassifierTrainConfig,
    seed: u64,
) -> Result<TrainTrace> {
    plan.validate()?;
    let lr_ok = cfg.learning_rate.is_finite() && cfg.learning_rate > 0.0;
    if cfg.epochs == 0 || cfg.batch_size == 0 || !lr_ok {
        return Err(Error::config("classifier", "epochs, batch size and learning rate must be positive"));
    }
    let max_label = plan
        .real
        .labels
        .iter()
        .chain(plan.replay.iter().flat_map(|r| &r.batch.labels))
        .max()
        .copied()
        .unwrap_or(0) as usize;
    if max_label >= classifier.num_classes() {
        return Err(Error::InvalidLabel {
            label: max_label,
            num_classes: classifier.num_classes(),
        });
    }
    let sizes = plan.source_sizes();
    let total = plan.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut adam = Adam::new(cfg.learning_rate);
    let mut trace = TrainTrace::default();
    for epoch in 0..cfg.epochs {
        adam.learning_rate = if epoch >= cfg.decay_epoch() {
            cfg.learning_rate * LR_DECAY_FACTOR
        } else {
            cfg.learning_rate
        };
        let mut sum = 0.0;
        for (b, picks) in mixture_schedule(&sizes, cfg.batch_size, &mut rng).into_iter().enumerate() {
            if b == 0 {
                let check = composite_check(classifier, plan, &picks)?;
                trace.max_composite_gap = trace.max_composite_gap.max(check.gap());
            }
            let (x, labels, weights) = plan.gather(&picks)?;
            let fwd = classifier.forward_trace(&x)?;
            let (loss, dlogits) = weighted_cross_entropy(fwd.logits(), &labels, &weights)?;
            if !loss.is_finite() {
                return Err(Error::Divergence(format!("classifier loss is not finite in epoch {epoch}")));
            }
            sum += loss as f64 * picks.len() as f64;
            let grads = classifier.backward(&fwd, &dlogits)?;
            adam.step(classifier.params_mut(), &grads)
                .map_err(|e| Error::Divergence(format!("epoch {epoch}: {e}")))?;
        }
        trace.epoch_losses.push(sum / total as f64);
    }
    trace.steps = adam.steps();
    Ok(trace)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Evaluation {
    pub per_class: BTreeMap<ClassId, f64>,
    pub overall: f64,
    pub correct: usize,
    pub total: usize,
}

/// Top-1 accuracy with the argmax taken over the first `seen_classes`
/// outputs; no task identity is used. An empty test set scores 0.
pub fn evaluate_single_headed(
    classifier: &Classifier<f32>,
    test: &LabeledDataset,
    seen_classes: usize,
) -> Result<Evaluation> {
    if let Some(&l) = test.labels.iter().find(|&&l| l as usize >= seen_classes) {
        return Err(Error::InvalidLabel {
            label: l as usize,
            num_classes: seen_classes,
        });
    }
    let predicted = classifier.predict(&test.images, seen_classes)?;
    let mut counts: BTreeMap<ClassId, (usize, usize)> = BTreeMap::new();
    for (&y, &p) in test.labels.iter().zip(&predicted) {
        let c = counts.entry(y).or_default();
        c.1 += 1;
        if p == y as usize {
            c.0 += 1;
        }
    }
    let correct = counts.values().map(|c| c.0).sum();
    let total = test.len();
    Ok(Evaluation {
        per_class: counts.into_iter().map(|(k, (c, n))| (k, c as f64 / n as f64)).collect(),
        overall: if total == 0 { 0.0 } else { correct as f64 / total as f64 },
        correct,
        total,
    })
}

/// Mean of the overall accuracies recorded after each increment.
pub fn average_incremental_accuracy(accuracies: &[f64]) -> Result<f64> {
    if accuracies.is_empty() {
        return Err(Error::InvalidInput("no increments to average".into()));
    }
    Ok(accuracies.iter().sum::<f64>() / accuracies.len() as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentData {
    pub train: LabeledDataset,
    pub test: LabeledDataset,
}

/// Loads the configured dataset: MNIST zero-padded to 32x32, or a synthetic glyph
/// set seeded from the config seed.
pub fn load_experiment_data(cfg: &ExperimentConfig) -> Result<ExperimentData> {
    let (mut train, mut test) = match cfg.dataset {
        DatasetKind::Mnist => {
            let load = |split| -> Result<LabeledDataset> {
                let mut ds = load_mnist_split(&cfg.mnist_dir, split)?;
                // 32x32 IDX files (e.g. exported synthetic sets) are used as-is
                if ds.images.shape()[2..] != [32, 32] {
                    ds.images = pad_to_32(&ds.images)?;
                }
                Ok(ds)
            };
            (load(Split::Train)?, load(Split::Test)?)
        }
        DatasetKind::Synthetic => make_synthetic(
            cfg.synthetic_classes,
            cfg.synthetic_per_class,
            cfg.synthetic_image_size,
            cfg.synthetic_noise,
            cfg.seed,
        )?,
    };
    if let Some(n) = cfg.train_limit_per_class {
        train = train.limit_per_class(n);
    }
    if let Some(n) = cfg.test_limit_per_class {
        test = test.limit_per_class(n);
    }
    Ok(ExperimentData { train, test })
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct ReplayCounts {
    pub reconstructed: usize,
    pub pseudo: usize,
    /// Latents decoded for pseudo-images, including rejected ones.
    pub pseudo_sampled: usize,
    /// Pairs that yielded fewer pseudo-images than their weight.
    pub pseudo_shortfalls: usize,
    pub exemplars: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct IncrementReport {
    /// 1-based.
    pub increment: usize,
    pub new_classes: Vec<ClassId>,
    /// Keyed by dataset label.
    pub per_class_accuracy: BTreeMap<ClassId, f64>,
    pub overall_accuracy: f64,
    /// Stored units after the increment (exemplar images for the exemplar
    /// baseline).
    pub memory_units: usize,
    pub loss_trace: Vec<f64>,
    pub autoencoder_loss: Option<f64>,
    pub replay: ReplayCounts,
    pub merges: usize,
    pub max_composite_gap: f64,
    pub wall_s: f64,
}

/// Retained pseudo-images re-classified after generation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct PseudoAudit {
    pub retained: usize,
    pub agreeing: usize,
}

#[derive(Debug)]
pub struct ExperimentOutcome {
    pub seed: u64,
    pub schedule: TaskSchedule,
    pub reports: Vec<IncrementReport>,
    /// False when an error stopped the run; `reports` then holds the
    /// increments that finished.
    pub complete: bool,
    pub error: Option<Error>,
    /// Final memory, keyed by dataset labels.
    pub store: Option<MemoryStore<f32>>,
    pub pseudo_audit: PseudoAudit,
    pub peak_memory_units: usize,
    /// A few decoded episodes per class after the last increment, labelled
    /// with dataset labels.
    pub reconstructions: Option<LabeledDataset>,
}

impl ExperimentOutcome {
    pub fn accuracies(&self) -> Vec<f64> {
        self.reports.iter().map(|r| r.overall_accuracy).collect()
    }

    /// Average incremental accuracy over the first `n` increments.
    pub fn average_accuracy(&self, n: usize) -> Option<f64> {
        let acc = self.accuracies();
        if n == 0 || acc.len() < n {
            return None;
        }
        average_incremental_accuracy(&acc[..n]).ok()
    }
}

fn relabel(ds: &LabeledDataset, ordinal: &BTreeMap<ClassId, ClassId>) -> LabeledDataset {
    LabeledDataset {
        images: ds.images.clone(),
        labels: ds.labels.iter().map(|l| ordinal[l]).collect(),
        split: ds.split,
    }
}

fn schedule_for(cfg: &ExperimentConfig, train: &LabeledDataset, seed: u64) -> Result<TaskSchedule> {
    if cfg.shuffle_classes {
        return Ok(split_class_incremental(train, cfg.classes_per_increment, derive_seed(seed, &[0]))?.0);
    }
    Ok(TaskSchedule {
        groups: train
            .classes()
            .chunks(cfg.classes_per_increment)
            .map(<[_]>::to_vec)
            .collect(),
        order_seed: 0,
    })
}

/// Maps every stored location through `old`'s decoder and `new`'s encoder.
fn remap_store(store: &mut MemoryStore<f32>, old: &Autoencoder<f32>, new: &Autoencoder<f32>) -> Result<()> {
    let locations: Vec<Vec<f32>> = store.locations_mut().map(|l| l.to_vec()).collect();
    let mut mapped = Vec::with_capacity(locations.len());
    for chunk in locations.chunks(256) {
        let flat: Vec<&[f32]> = chunk.iter().map(Vec::as_slice).collect();
        let z = new.encode(&old.decode_flat(&flat)?)?;
        mapped.extend((0..z.count()).map(|i| z.item(i).to_vec()));
    }
    for (dst, src) in store.locations_mut().zip(mapped) {
        dst.copy_from_slice(&src);
    }
    Ok(())
}

struct Run<'a> {
    cfg: &'a ExperimentConfig,
    seed: u64,
    classifier_spec: ClassifierSpec,
    ae_spec: AutoencoderSpec,
    registry: TaskAutoencoderRegistry,
    store: Option<MemoryStore<f32>>,
    exemplars: BTreeMap<TaskId, LabeledDataset>,
    decay: DecayConfig,
    classifier: Option<Classifier<f32>>,
    audit: PseudoAudit,
    peak_units: usize,
}

impl Run<'_> {
    fn replay(&mut self, t: TaskId, old_class_count: usize, counts: &mut ReplayCounts) -> Result<Vec<WeightedReplay>> {
        let mut out = Vec::new();
        let (c, s) = (self.ae_spec.in_channels, self.ae_spec.image_size);
        if self.cfg.variant == Variant::ExemplarBaseline {
            for (&task, ex) in &self.exemplars {
                counts.exemplars += ex.len();
                out.push(WeightedReplay {
                    batch: ReplayBatch {
                        images: ex.images.clone(),
                        labels: ex.labels.clone(),
                        stream: ReplayStream::Exemplar,
                        task,
                    },
                    weight: 1.0,
                });
            }
            return Ok(out);
        }
        let (Some(store), Some(classifier)) = (&self.store, &self.classifier) else {
            return Ok(out);
        };
        for task in 0..t {
            let decoder = self
                .registry
                .for_task(task)
                .ok_or_else(|| Error::Consistency(format!("no autoencoder for task {task}")))?;
            let buckets: Vec<(ClassId, _)> = store.buckets().filter(|(_, b)| b.task() == task).collect();
            let episodes: Vec<_> = buckets.iter().flat_map(|(_, b)| b.episodes()).collect();
            let recon = reconstruct_task(task, &episodes, decoder)?;
            counts.reconstructed += recon.len();

            let mut pseudo = ReplayBatch::empty(ReplayStream::Pseudo, task, c, s);
            for (label, bucket) in &buckets {
                for (k, pair) in bucket.pairs().iter().enumerate() {
                    let got = generate_with_retry(
                        pair,
                        decoder,
                        classifier,
                        old_class_count,
                        self.cfg.oversample_factor,
                        self.cfg.retry_oversample_factor,
                        derive_seed(self.seed, &[4, t as u64, *label as u64, k as u64]),
                    )?;
                    counts.pseudo_sampled += got.sampled;
                    counts.pseudo_shortfalls += usize::from(got.shortfall);
                    if !got.batch.is_empty() {
                        pseudo.images = Tensor4::concat(&[&pseudo.images, &got.batch.images])?;
                        pseudo.labels.extend(&got.batch.labels);
                    }
                }
            }
            if !pseudo.is_empty() {
                let verdict = classifier.predict(&pseudo.images, old_class_count)?;
                self.audit.retained += pseudo.len();
                self.audit.agreeing += verdict
                    .iter()
                    .zip(&pseudo.labels)
                    .filter(|(p, l)| **p == **l as usize)
                    .count();
            }
            counts.pseudo += pseudo.len();
            for batch in [recon, pseudo] {
                if !batch.is_empty() {
                    let weight = self.decay.weight(batch.stream, task);
                    out.push(WeightedReplay { batch, weight });
                }
            }
        }
        Ok(out)
    }

    fn increment(
        &mut self,
        t: TaskId,
        group: &[ClassId],
        old_class_count: usize,
        task_train: &LabeledDataset,
        test: &LabeledDataset,
    ) -> Result<IncrementReport> {
        let started = Instant::now();
        let cfg = self.cfg;
        let seen = old_class_count + group.len();
        let mut counts = ReplayCounts::default();
        let replay = self.replay(t, old_class_count, &mut counts)?;
        let plan = IncrementPlan {
            task: t,
            old_class_count,
            real: task_train.clone(),
            replay,
        };

        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.seed, &[1, t as u64]));
        let mut classifier = match self.classifier.take() {
            Some(mut c) if cfg.warm_start => {
                c.expand_head(seen, &mut rng);
                c
            }
            _ => Classifier::new(self.classifier_spec, seen, &mut rng)?,
        };
        let train_cfg = ClassifierTrainConfig {
            epochs: cfg.classifier_epochs,
            learning_rate: cfg.classifier_lr,
            batch_size: cfg.classifier_batch_size,
        };
        let trace = train_increment(&mut classifier, &plan, &train_cfg, derive_seed(self.seed, &[2, t as u64]))?;

        let mut autoencoder_loss = None;
        let mut merges = 0;
        if cfg.variant.uses_autoencoders() {
            let nst = cfg.nst();
            let ae_seed = derive_seed(self.seed, &[3, t as u64]);
            let ae = match self.registry.sharing() {
                AutoencoderSharing::PerTask => {
                    let (ae, report) =
                        train_task_autoencoder(&task_train.images, &classifier, self.ae_spec, &nst, ae_seed)?;
                    autoencoder_loss = Some(report.final_loss());
                    ae
                }
                AutoencoderSharing::Shared => {
                    let old = self.registry.take_shared();
                    let previous = old.clone();
                    let olds: Vec<&ReplayBatch> = plan.replay.iter().map(|r| &r.batch).collect();
                    let (ae, report) = retrain_shared_autoencoder(
                        old,
                        self.ae_spec,
                        &task_train.images,
                        &olds,
                        &classifier,
                        &nst,
                        ae_seed,
                        &mut self.decay,
                    )?;
                    autoencoder_loss = Some(report.final_loss());
                    if let (Some(prev), Some(store)) = (&previous, &mut self.store) {
                        remap_store(store, prev, &ae)?;
                    }
                    ae
                }
            };
            let episodes = encode_task(&ae, task_train, t)?;
            let store = match &mut self.store {
                Some(s) => s,
                None => self.store.insert(MemoryStore::new(self.ae_spec.latent_len())?),
            };
            merges = store.enforce_budget(episodes, cfg.budget)?.merges;
            let key = match self.registry.sharing() {
                AutoencoderSharing::PerTask => t,
                AutoencoderSharing::Shared => SHARED_AUTOENCODER,
            };
            store.set_checkpoint(key, ae.to_bytes());
            self.registry.insert(t, ae);
        }
        if cfg.variant == Variant::ExemplarBaseline {
            self.exemplars.insert(t, task_train.limit_per_class(cfg.exemplars_per_class));
        }
        let memory_units = match cfg.variant {
            Variant::ExemplarBaseline => self.exemplars.values().map(LabeledDataset::len).sum(),
            _ => self.store.as_ref().map_or(0, MemoryStore::memory_units),
        };
        self.peak_units = self.peak_units.max(memory_units);

        let seen_ordinals: Vec<ClassId> = (0..seen as ClassId).collect();
        let eval = evaluate_single_headed(&classifier, &test.filter_classes(&seen_ordinals), seen)?;
        self.classifier = Some(classifier);
        Ok(IncrementReport {
            increment: t as usize + 1,
            new_classes: Vec::new(),
            per_class_accuracy: eval.per_class,
            overall_accuracy: eval.overall,
            memory_units,
            loss_trace: trace.epoch_losses,
            autoencoder_loss,
            replay: counts,
            merges,
            max_composite_gap: trace.max_composite_gap,
            wall_s: started.elapsed().as_secs_f64(),
        })
    }

    fn reconstructions(&self, labels: &[ClassId]) -> Result<Option<LabeledDataset>> {
        let Some(store) = &self.store else {
            return Ok(None);
        };
        let mut parts = Vec::new();
        let mut out_labels = Vec::new();
        for (label, bucket) in store.buckets() {
            let decoder = self
                .registry
                .for_task(bucket.task())
                .ok_or_else(|| Error::Consistency(format!("no autoencoder for task {}", bucket.task())))?;
            let flat: Vec<&[f32]> = bucket
                .items()
                .take(RECONSTRUCTIONS_PER_CLASS)
                .map(|item| item.location())
                .collect();
            out_labels.extend(std::iter::repeat(labels[label as usize]).take(flat.len()));
            parts.push(decoder.decode_flat(&flat)?);
        }
        if parts.is_empty() {
            return Ok(None);
        }
        let images = Tensor4::concat(&parts.iter().collect::<Vec<_>>())?;
        Ok(Some(LabeledDataset::new(images, out_labels, Split::Train)?))
    }
}

/// Runs every increment of the configured protocol with `seed`. Errors stop
/// the run and are returned inside the outcome together with the reports of
/// the increments that finished.
pub fn run_experiment(cfg: &ExperimentConfig, data: &ExperimentData, seed: u64) -> ExperimentOutcome {
    let mut outcome = ExperimentOutcome {
        seed,
        schedule: TaskSchedule {
            groups: Vec::new(),
            order_seed: 0,
        },
        reports: Vec::new(),
        complete: false,
        error: None,
        store: None,
        pseudo_audit: PseudoAudit::default(),
        peak_memory_units: 0,
        reconstructions: None,
    };
    if let Err(e) = run_into(cfg, data, seed, &mut outcome) {
        outcome.error = Some(e);
    } else {
        outcome.complete = true;
    }
    outcome
}

fn run_into(cfg: &ExperimentConfig, data: &ExperimentData, seed: u64, outcome: &mut ExperimentOutcome) -> Result<()> {
    cfg.validate()?;
    let schedule = schedule_for(cfg, &data.train, seed)?;
    outcome.schedule = schedule.clone();
    let order = schedule.class_order();
    let ordinal: BTreeMap<ClassId, ClassId> = order.iter().enumerate().map(|(i, &c)| (c, i as ClassId)).collect();
    if let Some(l) = data.test.labels.iter().find(|l| !ordinal.contains_key(l)) {
        return Err(Error::Consistency(format!("test class {l} never appears in training data")));
    }
    let train = relabel(&data.train, &ordinal);
    let test = relabel(&data.test, &ordinal);
    let [_, channels, size, _] = train.images.shape();

    let mut run = Run {
        cfg,
        seed,
        classifier_spec: ClassifierSpec {
            in_channels: channels,
            image_size: size,
            width: cfg.classifier_width,
        },
        ae_spec: AutoencoderSpec {
            in_channels: channels,
            image_size: size,
            ..AutoencoderSpec::default()
        },
        registry: TaskAutoencoderRegistry::new(match cfg.variant {
            Variant::Eecs => AutoencoderSharing::Shared,
            _ => AutoencoderSharing::PerTask,
        }),
        store: None,
        exemplars: BTreeMap::new(),
        decay: DecayConfig::new(cfg.gamma_r, cfg.gamma_p)?,
        classifier: None,
        audit: PseudoAudit::default(),
        peak_units: 0,
    };

    let mut old_class_count = 0;
    let result = (|| -> Result<()> {
        for (t, group) in schedule.groups.iter().enumerate() {
            let ordinals: Vec<ClassId> = (old_class_count..old_class_count + group.len())
                .map(|c| c as ClassId)
                .collect();
            let task_train = train.filter_classes(&ordinals);
            let mut report = run.increment(t as TaskId, &ordinals, old_class_count, &task_train, &test)?;
            report.new_classes = group.clone();
            report.per_class_accuracy = report
                .per_class_accuracy
                .into_iter()
                .map(|(k, v)| (order[k as usize], v))
                .collect();
            outcome.reports.push(report);
            old_class_count += group.len();
        }
        Ok(())
    })();
    outcome.pseudo_audit = run.audit;
    outcome.peak_memory_units = run.peak_units;
    let reconstructions = match &result {
        Ok(()) => run.reconstructions(&order),
        Err(_) => Ok(None),
    };
    outcome.store = run.store.take();
    if let Some(store) = outcome.store.as_mut() {
        store.relabel(|k| order[k as usize])?;
    }
    result?;
    outcome.reconstructions = reconstructions?;
    Ok(())
}
