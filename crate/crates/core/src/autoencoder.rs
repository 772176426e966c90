//! Training autoencoders against a mix of pixel reconstruction error and
//! feature-space (content) error measured by a frozen classifier, and turning
//! task data into encoded episodes.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{LabeledDataset, TaskId};
use crate::error::{Error, Result};
use crate::memory::{EncodedEpisode, SHARED_AUTOENCODER};
use crate::rehearsal::{DecayConfig, ReplayBatch};
use crate::nn::{
    l2_reconstruction_loss, mse_grad, Adam, Autoencoder, AutoencoderSpec, Classifier, ClassifierSpec,
    Parameters,
};
use crate::seed::derive_seed;
use crate::tensor::{Scalar, Tensor4};

/// Real-image feature maps are cached for the whole training set up to this
/// many values; beyond it they are recomputed per batch.
const FEATURE_CACHE_LIMIT: usize = 64 << 20;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NstTrainConfig {
    /// Weight of the content term; the reconstruction term gets `1 - lambda`.
    pub lambda: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Classifier conv layer (1-based) whose activations define content.
    pub feature_layer: usize,
}

impl Default for NstTrainConfig {
    fn default() -> Self {
        Self {
            lambda: 0.5,
            epochs: 50,
            batch_size: 64,
            learning_rate: 1e-3,
            feature_layer: ClassifierSpec::CONV_LAYERS,
        }
    }
}

impl NstTrainConfig {
    pub fn validate(&self) -> Result<()> {
        check_lambda(self.lambda)?;
        if self.epochs == 0 {
            return Err(Error::config("epochs", "must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be positive"));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::config("learning_rate", "must be a positive number"));
        }
        if !(1..=ClassifierSpec::CONV_LAYERS).contains(&self.feature_layer) {
            return Err(Error::config(
                "feature_layer",
                format!("must be in 1..={}", ClassifierSpec::CONV_LAYERS),
            ));
        }
        Ok(())
    }
}

fn check_lambda(lambda: f64) -> Result<()> {
    if (0.0..=1.0).contains(&lambda) {
        Ok(())
    } else {
        Err(Error::config("lambda", format!("{lambda} is outside [0, 1]")))
    }
}

/// `(1 - lambda) * l_r + lambda * l_cont`.
pub fn combined_loss(lambda: f64, l_r: f64, l_cont: f64) -> Result<f64> {
    check_lambda(lambda)?;
    Ok((1.0 - lambda) * l_r + lambda * l_cont)
}

/// Mean squared difference between the classifier's feature maps of `real`
/// and `recon` at conv layer `feature_layer`.
pub fn content_loss<T: Scalar>(
    classifier: &Classifier<T>,
    real: &Tensor4<T>,
    recon: &Tensor4<T>,
    feature_layer: usize,
) -> Result<T> {
    if real.shape() != recon.shape() {
        return Err(Error::Shape(format!(
            "real {:?} and reconstruction {:?} differ",
            real.shape(),
            recon.shape()
        )));
    }
    let a = classifier.features(real, feature_layer)?;
    let b = classifier.features(recon, feature_layer)?;
    l2_reconstruction_loss(&a, &b)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ObjectiveValue<T> {
    pub combined: T,
    pub reconstruction: T,
    /// Zero, and not evaluated, when `lambda == 0`.
    pub content: T,
}

/// Combined objective on one batch and its gradient with respect to every
/// autoencoder parameter. The classifier only supplies input gradients.
/// `real_features` may carry precomputed features of `x`.
pub fn combined_objective<T: Scalar>(
    ae: &Autoencoder<T>,
    classifier: &Classifier<T>,
    x: &Tensor4<T>,
    real_features: Option<&Tensor4<T>>,
    lambda: f64,
    feature_layer: usize,
) -> Result<(ObjectiveValue<T>, Vec<Vec<T>>)> {
    check_lambda(lambda)?;
    let trace = ae.forward_trace(x)?;
    let recon = trace.output();
    let l_r = l2_reconstruction_loss(x, recon)?;
    let mut dout = mse_grad(x, recon)?;
    let mut l_c = T::zero();
    if lambda > 0.0 {
        let (keep, mix) = (T::of(1.0 - lambda), T::of(lambda));
        let ft = classifier.feature_trace(recon, feature_layer)?;
        let computed;
        let fr = match real_features {
            Some(f) => f,
            None => {
                computed = classifier.features(x, feature_layer)?;
                &computed
            }
        };
        l_c = l2_reconstruction_loss(fr, ft.features())?;
        let dfeat = mse_grad(fr, ft.features())?;
        let dcontent = classifier.feature_input_grad(&ft, &dfeat)?;
        for (d, c) in dout.data_mut().iter_mut().zip(dcontent.data()) {
            *d = keep * *d + mix * *c;
        }
    }
    let combined = T::of(1.0 - lambda) * l_r + T::of(lambda) * l_c;
    let grads = ae.backward(&trace, &dout)?;
    Ok((
        ObjectiveValue {
            combined,
            reconstruction: l_r,
            content: l_c,
        },
        grads,
    ))
}

/// Per-epoch record of one autoencoder training call.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct AeTrainReport {
    /// Mean combined loss of the untrained model over the training set.
    pub initial_loss: f64,
    /// Mean combined loss over the batches of each epoch.
    pub epoch_losses: Vec<f64>,
    pub samples_per_source: Vec<usize>,
}

impl AeTrainReport {
    pub fn final_loss(&self) -> f64 {
        self.epoch_losses.last().copied().unwrap_or(self.initial_loss)
    }
}

/// One epoch's batches over several sources: the concatenated index space is
/// shuffled and cut into batches, so every source is visited once per epoch
/// and batches mix sources in proportion to their sizes on average.
pub fn mixture_schedule(sizes: &[usize], batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<(usize, usize)>> {
    let mut all: Vec<(usize, usize)> = sizes
        .iter()
        .enumerate()
        .flat_map(|(s, &n)| (0..n).map(move |i| (s, i)))
        .collect();
    all.shuffle(rng);
    all.chunks(batch_size.max(1)).map(<[_]>::to_vec).collect()
}

fn gather(sources: &[&Tensor4<f32>], picks: &[(usize, usize)]) -> Result<Tensor4<f32>> {
    let first = sources[picks[0].0].shape();
    let mut data = Vec::with_capacity(picks.len() * sources[picks[0].0].item_len());
    for &(s, i) in picks {
        data.extend_from_slice(sources[s].item(i));
    }
    Tensor4::from_vec([picks.len(), first[1], first[2], first[3]], data)
}

struct FeatureCache(Option<Vec<Tensor4<f32>>>);

impl FeatureCache {
    fn build(classifier: &Classifier<f32>, sources: &[&Tensor4<f32>], cfg: &NstTrainConfig) -> Result<Self> {
        if cfg.lambda == 0.0 {
            return Ok(Self(None));
        }
        let total: usize = sources.iter().map(|s| s.count()).sum();
        let probe = classifier.features(&sources[0].select(&[0]), cfg.feature_layer)?;
        if total * probe.item_len() > FEATURE_CACHE_LIMIT {
            return Ok(Self(None));
        }
        let mut cache = Vec::with_capacity(sources.len());
        for s in sources {
            let mut parts = Vec::new();
            for start in (0..s.count()).step_by(256) {
                let idx: Vec<usize> = (start..(start + 256).min(s.count())).collect();
                parts.push(classifier.features(&s.select(&idx), cfg.feature_layer)?);
            }
            let refs: Vec<&Tensor4<f32>> = parts.iter().collect();
            cache.push(if refs.is_empty() {
                Tensor4::zeros([0, 1, 1, 1])
            } else {
                Tensor4::concat(&refs)?
            });
        }
        Ok(Self(Some(cache)))
    }

    fn batch(&self, picks: &[(usize, usize)]) -> Result<Option<Tensor4<f32>>> {
        match &self.0 {
            Some(c) => {
                let refs: Vec<&Tensor4<f32>> = c.iter().collect();
                Ok(Some(gather(&refs, picks)?))
            }
            None => Ok(None),
        }
    }
}

/// Trains `ae` in place on the union of `sources`. The classifier is read
/// only.
pub fn train_autoencoder(
    ae: &mut Autoencoder<f32>,
    sources: &[&Tensor4<f32>],
    classifier: &Classifier<f32>,
    cfg: &NstTrainConfig,
    seed: u64,
) -> Result<AeTrainReport> {
    cfg.validate()?;
    let sizes: Vec<usize> = sources.iter().map(|s| s.count()).collect();
    let total: usize = sizes.iter().sum();
    if total == 0 {
        return Err(Error::InvalidInput("autoencoder training set is empty".into()));
    }
    let live: Vec<&Tensor4<f32>> = sources.iter().copied().filter(|s| s.count() > 0).collect();
    let cache = FeatureCache::build(classifier, &live, cfg)?;
    let live_sizes: Vec<usize> = live.iter().map(|s| s.count()).collect();
    let objective = |ae: &Autoencoder<f32>, picks: &[(usize, usize)]| {
        let x = gather(&live, picks)?;
        let feats = cache.batch(picks)?;
        combined_objective(ae, classifier, &x, feats.as_ref(), cfg.lambda, cfg.feature_layer)
    };

    let mut report = AeTrainReport {
        samples_per_source: sizes,
        ..Default::default()
    };
    let in_order: Vec<(usize, usize)> = live_sizes
        .iter()
        .enumerate()
        .flat_map(|(s, &n)| (0..n).map(move |i| (s, i)))
        .collect();
    let mut sum = 0.0;
    for picks in in_order.chunks(cfg.batch_size) {
        sum += objective(ae, picks)?.0.combined as f64 * picks.len() as f64;
    }
    report.initial_loss = sum / total as f64;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut adam = Adam::new(cfg.learning_rate);
    for epoch in 0..cfg.epochs {
        let mut sum = 0.0;
        for picks in mixture_schedule(&live_sizes, cfg.batch_size, &mut rng) {
            let (value, grads) = objective(ae, &picks)?;
            if !value.combined.is_finite() {
                return Err(Error::Divergence(format!("autoencoder loss is not finite in epoch {epoch}")));
            }
            sum += value.combined as f64 * picks.len() as f64;
            adam.step(ae.params_mut(), &grads)
                .map_err(|e| Error::Divergence(format!("epoch {epoch}: {e}")))?;
        }
        report.epoch_losses.push(sum / total as f64);
    }
    Ok(report)
}

/// Fresh autoencoder trained on one task's images.
pub fn train_task_autoencoder(
    data: &Tensor4<f32>,
    classifier: &Classifier<f32>,
    spec: AutoencoderSpec,
    cfg: &NstTrainConfig,
    seed: u64,
) -> Result<(Autoencoder<f32>, AeTrainReport)> {
    let mut ae = Autoencoder::new(spec, &mut ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0])))?;
    let report = train_autoencoder(&mut ae, &[data], classifier, cfg, derive_seed(seed, &[1]))?;
    Ok((ae, report))
}

/// Continues training the shared autoencoder (or starts one when `current`
/// is `None`) on new images mixed with replayed images of old tasks, then
/// bumps the retrain counter of every (task, stream) that contributed.
#[allow(clippy::too_many_arguments)]
pub fn retrain_shared_autoencoder(
    current: Option<Autoencoder<f32>>,
    spec: AutoencoderSpec,
    new_data: &Tensor4<f32>,
    old_replay: &[&ReplayBatch],
    classifier: &Classifier<f32>,
    cfg: &NstTrainConfig,
    seed: u64,
    decay: &mut DecayConfig,
) -> Result<(Autoencoder<f32>, AeTrainReport)> {
    let mut ae = match current {
        Some(ae) => ae,
        None => Autoencoder::new(spec, &mut ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0])))?,
    };
    let mut sources = vec![new_data];
    sources.extend(old_replay.iter().map(|b| &b.images));
    let report = train_autoencoder(&mut ae, &sources, classifier, cfg, derive_seed(seed, &[1]))?;
    let mut bumped = std::collections::BTreeSet::new();
    for b in old_replay {
        if !b.is_empty() && bumped.insert((b.stream, b.task)) {
            decay.bump(b.stream, b.task);
        }
    }
    Ok((ae, report))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AutoencoderSharing {
    /// One frozen autoencoder per task.
    PerTask,
    /// A single autoencoder retrained every increment.
    Shared,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskAutoencoderRegistry {
    sharing: AutoencoderSharing,
    models: BTreeMap<TaskId, Autoencoder<f32>>,
}

impl TaskAutoencoderRegistry {
    pub fn new(sharing: AutoencoderSharing) -> Self {
        Self {
            sharing,
            models: BTreeMap::new(),
        }
    }

    pub fn sharing(&self) -> AutoencoderSharing {
        self.sharing
    }

    pub fn len(&self) -> usize {
        self.models.len()
    }

    pub fn is_empty(&self) -> bool {
        self.models.is_empty()
    }

    /// Records the autoencoder trained at `task`; in shared mode it replaces
    /// the previous one.
    pub fn insert(&mut self, task: TaskId, ae: Autoencoder<f32>) {
        let key = match self.sharing {
            AutoencoderSharing::PerTask => task,
            AutoencoderSharing::Shared => SHARED_AUTOENCODER,
        };
        self.models.insert(key, ae);
    }

    /// Decoder responsible for `task`'s episodes.
    pub fn for_task(&self, task: TaskId) -> Option<&Autoencoder<f32>> {
        match self.sharing {
            AutoencoderSharing::PerTask => self.models.get(&task),
            AutoencoderSharing::Shared => self.models.get(&SHARED_AUTOENCODER),
        }
    }

    pub fn shared(&self) -> Option<&Autoencoder<f32>> {
        self.models.get(&SHARED_AUTOENCODER)
    }

    pub fn take_shared(&mut self) -> Option<Autoencoder<f32>> {
        self.models.remove(&SHARED_AUTOENCODER)
    }

    /// Serialized models keyed as in the store file.
    pub fn checkpoints(&self) -> BTreeMap<TaskId, Vec<u8>> {
        self.models.iter().map(|(k, m)| (*k, m.to_bytes())).collect()
    }
}

/// One episode per image: the flattened encoder output, with the image's
/// label and the given task.
pub fn encode_task(ae: &Autoencoder<f32>, data: &LabeledDataset, task: TaskId) -> Result<Vec<EncodedEpisode<f32>>> {
    let mut out = Vec::with_capacity(data.len());
    for start in (0..data.len()).step_by(256) {
        let idx: Vec<usize> = (start..(start + 256).min(data.len())).collect();
        let z = ae.encode(&data.images.select(&idx))?;
        for (k, &i) in idx.iter().enumerate() {
            out.push(EncodedEpisode {
                embedding: z.item(k).to_vec(),
                label: data.labels[i],
                task,
            });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn combined_loss_closed_forms() {
        assert_eq!(combined_loss(0.0, 2.0, 4.0).unwrap(), 2.0);
        assert_eq!(combined_loss(1.0, 2.0, 4.0).unwrap(), 4.0);
        assert_eq!(combined_loss(0.5, 2.0, 4.0).unwrap(), 3.0);
        assert!(matches!(
            combined_loss(1.5, 2.0, 4.0),
            Err(Error::Config { field, .. }) if field == "lambda"
        ));
    }

    #[test]
    fn config_validation_names_fields() {
        let bad = NstTrainConfig {
            feature_layer: 4,
            ..Default::default()
        };
        assert!(matches!(bad.validate(), Err(Error::Config { field, .. }) if field == "feature_layer"));
        assert!(NstTrainConfig::default().validate().is_ok());
    }

    #[test]
    fn schedule_visits_each_sample_once() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let batches = mixture_schedule(&[5, 0, 3], 2, &mut rng);
        let mut all: Vec<_> = batches.concat();
        all.sort();
        assert_eq!(all, vec![(0, 0), (0, 1), (0, 2), (0, 3), (0, 4), (2, 0), (2, 1), (2, 2)]);
        assert_eq!(batches.len(), 4);
    }

    #[test]
    fn registry_sizes() {
        let spec = AutoencoderSpec::default();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut per = TaskAutoencoderRegistry::new(AutoencoderSharing::PerTask);
        let mut shared = TaskAutoencoderRegistry::new(AutoencoderSharing::Shared);
        for t in 0..3 {
            per.insert(t, Autoencoder::new(spec, &mut rng).unwrap());
            shared.insert(t, Autoencoder::new(spec, &mut rng).unwrap());
            assert_eq!(per.len(), t as usize + 1);
            assert_eq!(shared.len(), 1);
        }
        assert!(per.for_task(3).is_none());
        assert_eq!(shared.for_task(0), shared.for_task(2));
    }
}
