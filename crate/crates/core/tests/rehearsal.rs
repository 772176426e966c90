mod common;

use eec_core::memory::{ConceptPair, EncodedEpisode};
use eec_core::nn::{Autoencoder, AutoencoderSpec, Classifier};
use eec_core::rehearsal::{
    generate_filtered_pseudo_images, generate_with_retry, reconstruct_task, sample_pseudo_episodes, ReplayStream,
};
use eec_core::seed::derive_seed;
use eec_core::Tensor4;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn decoder(seed: u64) -> Autoencoder<f32> {
    let spec = AutoencoderSpec {
        image_size: 16,
        ..AutoencoderSpec::default()
    };
    Autoencoder::new(spec, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

fn pair(label: u32, weight: u32, dim: usize, spread: f32) -> ConceptPair<f32> {
    ConceptPair {
        centroid: (0..dim).map(|d| ((d % 7) as f32 - 3.0) * 0.3).collect(),
        variance: vec![spread; dim],
        weight,
        label,
        task: 0,
    }
}

fn constant_classifier(num_classes: usize) -> Classifier<f32> {
    // all-zero logits: argmax is class 0 for every input
    let mut c = common::classifier(16, num_classes, 0);
    c.zero_head();
    c
}

#[test]
fn reconstruction_is_decoding_each_episode() {
    let ae = decoder(1);
    let (train, _) = common::synthetic(&[2, 5], 3, 16, 0);
    let eps: Vec<EncodedEpisode> = eec_core::autoencoder::encode_task(&ae, &train, 4).unwrap();
    let refs: Vec<&EncodedEpisode> = eps.iter().collect();
    let batch = reconstruct_task(4, &refs, &ae).unwrap();
    assert_eq!(batch.len(), eps.len());
    assert_eq!(batch.stream, ReplayStream::Reconstructed);
    assert_eq!(batch.labels, train.labels);
    let (c, h, w) = ae.spec().latent_shape();
    for (i, e) in eps.iter().enumerate() {
        let z = Tensor4::from_vec([1, c, h, w], e.embedding.clone()).unwrap();
        assert_eq!(batch.images.item(i), ae.decode(&z).unwrap().item(0));
    }

    let empty = reconstruct_task(4, &[], &ae).unwrap();
    assert!(empty.is_empty());
    assert_eq!(empty.images.shape(), [0, 1, 16, 16]);
    assert!(reconstruct_task(3, &refs, &ae).is_err());
    let short = EncodedEpisode {
        embedding: vec![0.0; 5],
        label: 0,
        task: 4,
    };
    assert!(reconstruct_task(4, &[&short], &ae).is_err());
}

#[test]
fn constant_classifiers_bound_the_filter() {
    let ae = decoder(2);
    let dim = ae.spec().latent_len();
    let clf = constant_classifier(2);
    let all = generate_filtered_pseudo_images(&pair(0, 7, dim, 0.5), &ae, &clf, 2, 5, 1).unwrap();
    assert_eq!(all.batch.len(), 7);
    assert_eq!(all.sampled, 35);
    assert!(!all.shortfall);
    let none = generate_filtered_pseudo_images(&pair(1, 7, dim, 0.5), &ae, &clf, 2, 5, 1).unwrap();
    assert!(none.batch.is_empty() && none.shortfall);
    let retried = generate_with_retry(&pair(1, 7, dim, 0.5), &ae, &clf, 2, 5, 10, 1).unwrap();
    assert!(retried.batch.is_empty() && retried.shortfall);
    assert_eq!(retried.sampled, 35 + 70);
}

#[test]
fn survivors_match_an_independent_recount() {
    let (train, _) = common::synthetic(&[0, 1], 20, 16, 3);
    let clf = common::trained_classifier(&train, 2, 3);
    let ae = decoder(3);
    let dim = ae.spec().latent_len();
    let (mut accepted, mut rejected) = (0, 0);
    for (label, seed) in [(0u32, 10u64), (1, 11), (0, 12), (1, 13)] {
        let p = pair(label, 40, dim, 4.0);
        let got = generate_filtered_pseudo_images(&p, &ae, &clf, 2, 5, seed).unwrap();

        let latents = sample_pseudo_episodes(&p, 200, seed);
        let flat: Vec<&[f32]> = latents.iter().map(Vec::as_slice).collect();
        let images = ae.decode_flat(&flat).unwrap();
        let mut kept = Vec::new();
        for i in 0..images.count() {
            let logits = clf.forward(&images.select(&[i])).unwrap();
            let row = logits.row(0);
            let best = if row[1] > row[0] { 1 } else { 0 };
            if best != label {
                rejected += 1;
            } else if kept.len() < 40 {
                kept.push(i);
                accepted += 1;
            }
        }
        assert_eq!(got.batch.len(), kept.len(), "label {label} seed {seed}");
        assert_eq!(got.batch.images, images.select(&kept));
        assert_eq!(got.shortfall, kept.len() < 40);
        assert!(got.batch.len() <= p.weight as usize);
        assert!(got.batch.labels.iter().all(|&l| l == label));

        // every survivor is classified as the pair's label
        let verdict = clf.predict(&got.batch.images, 2).unwrap();
        assert!(verdict.iter().all(|&v| v == label as usize));
    }
    assert!(accepted > 0 && rejected > 0, "accepted {accepted}, rejected {rejected}");
}

#[test]
fn retry_tops_up_from_an_independent_round() {
    let (train, _) = common::synthetic(&[0, 1], 20, 16, 4);
    let clf = common::trained_classifier(&train, 2, 4);
    let ae = decoder(4);
    let dim = ae.spec().latent_len();
    let p = pair(1, 30, dim, 4.0);
    let seed = 99;
    let got = generate_with_retry(&p, &ae, &clf, 2, 5, 10, seed).unwrap();
    let first = generate_filtered_pseudo_images(&p, &ae, &clf, 2, 5, derive_seed(seed, &[0])).unwrap();
    assert!(got.batch.len() >= first.batch.len());
    assert!(got.batch.len() <= 30);
    assert_eq!(got.batch.images.select(&(0..first.batch.len()).collect::<Vec<_>>()), first.batch.images);
    assert_eq!(got, generate_with_retry(&p, &ae, &clf, 2, 5, 10, seed).unwrap());
    if first.shortfall {
        let second = generate_filtered_pseudo_images(&p, &ae, &clf, 2, 10, derive_seed(seed, &[1])).unwrap();
        assert_eq!(got.batch.len(), (first.batch.len() + second.batch.len()).min(30));
        assert_eq!(got.sampled, 150 + 300);
    } else {
        assert_eq!(got, first);
    }
}

#[test]
fn filter_uses_only_prior_classes() {
    // three outputs, but only the first two count as prior classes
    let (train, _) = common::synthetic(&[0, 1, 2], 20, 16, 6);
    let clf = common::trained_classifier(&train, 3, 6);
    let ae = decoder(6);
    let p = pair(0, 25, ae.spec().latent_len(), 4.0);
    let got = generate_filtered_pseudo_images(&p, &ae, &clf, 2, 5, 5).unwrap();
    let verdict = clf.predict(&got.batch.images, 2).unwrap();
    assert!(verdict.iter().all(|&v| v == 0));
}
