//! Replay data for old tasks: decoded episodes, classifier-filtered
//! pseudo-images sampled around concept pairs, and the exponential decay
//! weights applied to their losses.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{ClassId, TaskId};
use crate::error::{Error, Result};
use crate::memory::{ConceptPair, EncodedEpisode};
use crate::nn::{Autoencoder, Classifier};
use crate::seed::derive_seed;
use crate::tensor::{ImageBatch, Scalar, Tensor4};

const DECODE_CHUNK: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReplayStream {
    Reconstructed,
    Pseudo,
    /// Stored real images; only the exemplar baseline produces these.
    Exemplar,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReplayBatch {
    pub images: ImageBatch,
    pub labels: Vec<ClassId>,
    pub stream: ReplayStream,
    pub task: TaskId,
}

impl ReplayBatch {
    pub fn empty(stream: ReplayStream, task: TaskId, channels: usize, size: usize) -> Self {
        Self {
            images: Tensor4::zeros([0, channels, size, size]),
            labels: Vec::new(),
            stream,
            task,
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// `exp(-gamma * alpha)`.
pub fn sample_decay_weight(gamma: f64, alpha: u32) -> Result<f64> {
    if !(0.0..=1.0).contains(&gamma) {
        return Err(Error::config("gamma", format!("{gamma} is outside [0, 1]")));
    }
    Ok((-gamma * alpha as f64).exp())
}

/// Decay coefficients and per-task retrain counters, kept separately for the
/// reconstructed and pseudo-image streams.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct DecayConfig {
    gamma_r: f64,
    gamma_p: f64,
    pub alpha_r: BTreeMap<TaskId, u32>,
    pub alpha_p: BTreeMap<TaskId, u32>,
}

impl DecayConfig {
    pub fn new(gamma_r: f64, gamma_p: f64) -> Result<Self> {
        for (field, g) in [("gamma_r", gamma_r), ("gamma_p", gamma_p)] {
            if !(0.0..=1.0).contains(&g) {
                return Err(Error::config(field, format!("{g} is outside [0, 1]")));
            }
        }
        Ok(Self {
            gamma_r,
            gamma_p,
            ..Default::default()
        })
    }

    pub fn gammas(&self) -> (f64, f64) {
        (self.gamma_r, self.gamma_p)
    }

    /// Records one more autoencoder training pass over `task`'s images on
    /// `stream`. Exemplars carry no counter.
    pub fn bump(&mut self, stream: ReplayStream, task: TaskId) {
        let alphas = match stream {
            ReplayStream::Reconstructed => &mut self.alpha_r,
            ReplayStream::Pseudo => &mut self.alpha_p,
            ReplayStream::Exemplar => return,
        };
        *alphas.entry(task).or_insert(0) += 1;
    }

    /// Loss weight for `task`'s images on `stream`. Exemplars are real
    /// images and are not decayed.
    pub fn weight(&self, stream: ReplayStream, task: TaskId) -> f64 {
        let (gamma, alphas) = match stream {
            ReplayStream::Reconstructed => (self.gamma_r, &self.alpha_r),
            ReplayStream::Pseudo => (self.gamma_p, &self.alpha_p),
            ReplayStream::Exemplar => return 1.0,
        };
        let alpha = alphas.get(&task).copied().unwrap_or(0);
        sample_decay_weight(gamma, alpha).expect("gammas validated on construction")
    }
}

/// Decodes one task's episodes, one image per episode, in order.
pub fn reconstruct_task(
    task: TaskId,
    episodes: &[&EncodedEpisode<f32>],
    decoder: &Autoencoder<f32>,
) -> Result<ReplayBatch> {
    let spec = decoder.spec();
    if let Some(e) = episodes.iter().find(|e| e.task != task) {
        return Err(Error::Consistency(format!(
            "episode of task {} passed to reconstruction of task {task}",
            e.task
        )));
    }
    let mut parts = Vec::new();
    for chunk in episodes.chunks(DECODE_CHUNK) {
        let flat: Vec<&[f32]> = chunk.iter().map(|e| e.embedding.as_slice()).collect();
        parts.push(decoder.decode_flat(&flat)?);
    }
    let images = if parts.is_empty() {
        Tensor4::zeros([0, spec.in_channels, spec.image_size, spec.image_size])
    } else {
        Tensor4::concat(&parts.iter().collect::<Vec<_>>())?
    };
    Ok(ReplayBatch {
        images,
        labels: episodes.iter().map(|e| e.label).collect(),
        stream: ReplayStream::Reconstructed,
        task,
    })
}

/// `count` draws from `N(centroid, diag(variance))`.
pub fn sample_pseudo_episodes<T: Scalar>(pair: &ConceptPair<T>, count: usize, seed: u64) -> Vec<Vec<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scale: Vec<f64> = pair.variance.iter().map(|v| v.as_f64().max(0.0).sqrt()).collect();
    (0..count)
        .map(|_| {
            pair.centroid
                .iter()
                .zip(&scale)
                .map(|(c, s)| {
                    let n: f64 = StandardNormal.sample(&mut rng);
                    T::of(c.as_f64() + s * n)
                })
                .collect()
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct PseudoOutcome {
    pub batch: ReplayBatch,
    /// Latents drawn and decoded.
    pub sampled: usize,
    /// Fewer survivors than the pair's weight.
    pub shortfall: bool,
}

/// Decodes `weight * oversample_factor` samples around `pair`, keeps those
/// the classifier assigns to `pair.label` (argmax over the first
/// `class_limit` outputs) and truncates to `pair.weight` images.
pub fn generate_filtered_pseudo_images(
    pair: &ConceptPair<f32>,
    decoder: &Autoencoder<f32>,
    classifier: &Classifier<f32>,
    class_limit: usize,
    oversample_factor: usize,
    seed: u64,
) -> Result<PseudoOutcome> {
    let spec = decoder.spec();
    let wanted = pair.weight as usize;
    let sampled = wanted.saturating_mul(oversample_factor);
    let latents = sample_pseudo_episodes(pair, sampled, seed);
    let mut kept: Vec<f32> = Vec::new();
    let mut n_kept = 0;
    for chunk in latents.chunks(DECODE_CHUNK) {
        if n_kept == wanted {
            break;
        }
        let flat: Vec<&[f32]> = chunk.iter().map(Vec::as_slice).collect();
        let images = decoder.decode_flat(&flat)?;
        let predicted = classifier.predict(&images, class_limit)?;
        for (i, p) in predicted.into_iter().enumerate() {
            if n_kept < wanted && p as ClassId == pair.label {
                kept.extend_from_slice(images.item(i));
                n_kept += 1;
            }
        }
    }
    let images = Tensor4::from_vec([n_kept, spec.in_channels, spec.image_size, spec.image_size], kept)?;
    Ok(PseudoOutcome {
        batch: ReplayBatch {
            images,
            labels: vec![pair.label; n_kept],
            stream: ReplayStream::Pseudo,
            task: pair.task,
        },
        sampled,
        shortfall: n_kept < wanted,
    })
}

/// One filtering round at `oversample_factor`, then, on shortfall, a second
/// round at `retry_factor` with an independent seed whose survivors top up
/// the first round's.
pub fn generate_with_retry(
    pair: &ConceptPair<f32>,
    decoder: &Autoencoder<f32>,
    classifier: &Classifier<f32>,
    class_limit: usize,
    oversample_factor: usize,
    retry_factor: usize,
    seed: u64,
) -> Result<PseudoOutcome> {
    let first = generate_filtered_pseudo_images(
        pair,
        decoder,
        classifier,
        class_limit,
        oversample_factor,
        derive_seed(seed, &[0]),
    )?;
    if !first.shortfall || retry_factor == 0 {
        return Ok(first);
    }
    let second = generate_filtered_pseudo_images(
        pair,
        decoder,
        classifier,
        class_limit,
        retry_factor,
        derive_seed(seed, &[1]),
    )?;
    let take = (pair.weight as usize - first.batch.len()).min(second.batch.len());
    let idx: Vec<usize> = (0..take).collect();
    let images = Tensor4::concat(&[&first.batch.images, &second.batch.images.select(&idx)])?;
    let n = images.count();
    Ok(PseudoOutcome {
        batch: ReplayBatch {
            images,
            labels: vec![pair.label; n],
            stream: ReplayStream::Pseudo,
            task: pair.task,
        },
        sampled: first.sampled + second.sampled,
        shortfall: n < pair.weight as usize,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pair(variance: f64) -> ConceptPair<f64> {
        ConceptPair {
            centroid: vec![1.0, -2.0, 0.5],
            variance: vec![variance; 3],
            weight: 4,
            label: 0,
            task: 0,
        }
    }

    #[test]
    fn decay_closed_forms() {
        assert_eq!(sample_decay_weight(0.7, 0).unwrap(), 1.0);
        assert!((sample_decay_weight(0.5, 2).unwrap() - (-1.0f64).exp()).abs() < 1e-12);
        assert_eq!(sample_decay_weight(0.0, 9).unwrap(), 1.0);
        assert!(sample_decay_weight(1.2, 1).is_err());
        let w: Vec<f64> = (0..5).map(|a| sample_decay_weight(0.3, a).unwrap()).collect();
        assert!(w.windows(2).all(|p| p[1] < p[0]));
    }

    #[test]
    fn decay_config_tracks_streams_separately() {
        let mut d = DecayConfig::new(0.5, 0.25).unwrap();
        d.alpha_r.insert(3, 2);
        assert!((d.weight(ReplayStream::Reconstructed, 3) - (-1.0f64).exp()).abs() < 1e-12);
        assert_eq!(d.weight(ReplayStream::Pseudo, 3), 1.0);
        assert_eq!(d.weight(ReplayStream::Exemplar, 3), 1.0);
        assert!(matches!(DecayConfig::new(0.5, -0.1), Err(Error::Config { field, .. }) if field == "gamma_p"));
    }

    #[test]
    fn zero_variance_samples_are_the_centroid() {
        let p = pair(0.0);
        let s = sample_pseudo_episodes(&p, 10, 1);
        assert_eq!(s.len(), 10);
        assert!(s.iter().all(|v| *v == p.centroid));
    }

    #[test]
    fn sample_mean_is_close_to_centroid() {
        let p = pair(0.49);
        let n = 10_000;
        let s = sample_pseudo_episodes(&p, n, 77);
        for d in 0..3 {
            let mean = s.iter().map(|v| v[d]).sum::<f64>() / n as f64;
            let bound = 4.0 * (0.49f64 / n as f64).sqrt();
            assert!((mean - p.centroid[d]).abs() < bound, "dim {d}: {mean}");
        }
        assert_eq!(s, sample_pseudo_episodes(&p, n, 77));
    }
}
