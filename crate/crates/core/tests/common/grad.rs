use eec_core::autoencoder::combined_objective;
use eec_core::nn::{
    finite_difference_check, weighted_cross_entropy, Autoencoder, AutoencoderSpec, Classifier, ClassifierSpec,
};
use eec_core::Tensor4;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const TOL: f64 = 1e-4;
pub const EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug)]
pub enum Objective {
    ClassifierCrossEntropy,
    Reconstruction,
    Content,
    /// Reconstruction and content mixed at lambda 0.5.
    Combined,
    /// Weighted cross-entropy over a real and a decayed replayed sample.
    WeightedReplay,
}

impl Objective {
    pub const ALL: [Objective; 5] = [
        Objective::ClassifierCrossEntropy,
        Objective::Reconstruction,
        Objective::Content,
        Objective::Combined,
        Objective::WeightedReplay,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Objective::ClassifierCrossEntropy => "classifier cross-entropy",
            Objective::Reconstruction => "pixel reconstruction",
            Objective::Content => "feature content",
            Objective::Combined => "combined lambda=0.5",
            Objective::WeightedReplay => "weighted replay composite",
        }
    }
}

fn images(rng: &mut ChaCha8Rng, n: usize) -> Tensor4<f64> {
    let data = (0..n * 32 * 32).map(|_| rng.gen::<f64>()).collect();
    Tensor4::from_vec([n, 1, 32, 32], data).unwrap()
}

/// Double-precision models and a 2-image batch.
fn models(seed: u64) -> (Classifier<f64>, Autoencoder<f64>, Tensor4<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let clf = Classifier::new(ClassifierSpec::default(), 3, &mut rng).unwrap();
    let ae = Autoencoder::new(AutoencoderSpec::default(), &mut rng).unwrap();
    (clf, ae, images(&mut rng, 2))
}

fn classifier_error(seed: u64, labels: [usize; 2], weights: [f64; 2]) -> f64 {
    let (mut clf, _, x) = models(seed);
    finite_difference_check(
        &mut clf,
        |m| {
            let trace = m.forward_trace(&x).unwrap();
            let (loss, dlogits) = weighted_cross_entropy(trace.logits(), &labels, &weights).unwrap();
            (loss, m.backward(&trace, &dlogits).unwrap())
        },
        EPS,
    )
}

fn autoencoder_error(seed: u64, lambda: f64) -> f64 {
    let (clf, mut ae, x) = models(seed);
    finite_difference_check(
        &mut ae,
        |m| {
            let (v, g) = combined_objective(m, &clf, &x, None, lambda, 3).unwrap();
            (v.combined, g)
        },
        EPS,
    )
}

/// Largest finite-difference error of `objective` for one seed.
pub fn gradient_error(objective: Objective, seed: u64) -> f64 {
    match objective {
        Objective::ClassifierCrossEntropy => classifier_error(seed, [0, 2], [1.0, 1.0]),
        Objective::Reconstruction => autoencoder_error(seed, 0.0),
        Objective::Content => autoencoder_error(seed, 1.0),
        Objective::Combined => autoencoder_error(seed, 0.5),
        Objective::WeightedReplay => classifier_error(seed, [2, 1], [1.0, (-1.0f64).exp()]),
    }
}
