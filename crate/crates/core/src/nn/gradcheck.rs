use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::Parameters;

/// Central-difference comparison against analytic gradients on a random
/// subset of parameters of each tensor.
#[derive(Clone, Copy, Debug)]
pub struct GradCheck {
    pub epsilon: f64,
    pub samples_per_tensor: usize,
    pub seed: u64,
}

impl GradCheck {
    pub fn new(epsilon: f64) -> Self {
        assert!(
            (1e-6..=1e-3).contains(&epsilon),
            "finite-difference epsilon {epsilon} outside [1e-6, 1e-3]"
        );
        Self {
            epsilon,
            samples_per_tensor: 16,
            seed: 0,
        }
    }

    /// Largest `|analytic - fd| / max(|analytic|, |fd|, 1e-8)` over the
    /// sampled parameters. `loss` must be a pure function of the model.
    pub fn run<M, L>(&self, model: &mut M, mut loss: L, analytic: &[Vec<f64>]) -> f64
    where
        M: Parameters<f64>,
        L: FnMut(&M) -> f64,
    {
        let sizes: Vec<usize> = model.params().iter().map(|p| p.len()).collect();
        assert_eq!(sizes.len(), analytic.len(), "one gradient per parameter tensor");
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut worst = 0.0f64;
        for (t, &len) in sizes.iter().enumerate() {
            assert_eq!(len, analytic[t].len(), "gradient {t} length");
            if len == 0 {
                continue;
            }
            let picks = index::sample(&mut rng, len, self.samples_per_tensor.min(len));
            for j in picks.iter() {
                let original = model.params()[t][j];
                model.params_mut()[t][j] = original + self.epsilon;
                let plus = loss(model);
                model.params_mut()[t][j] = original - self.epsilon;
                let minus = loss(model);
                model.params_mut()[t][j] = original;
                let fd = (plus - minus) / (2.0 * self.epsilon);
                let a = analytic[t][j];
                let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-8);
                worst = worst.max(rel);
            }
        }
        worst
    }
}

/// Runs a [`GradCheck`] with default sampling. `objective` returns the loss
/// and its analytic gradient; the gradient is only taken at the unperturbed
/// point.
pub fn finite_difference_check<M, F>(model: &mut M, mut objective: F, epsilon: f64) -> f64
where
    M: Parameters<f64>,
    F: FnMut(&M) -> (f64, Vec<Vec<f64>>),
{
    let (_, analytic) = objective(model);
    GradCheck::new(epsilon).run(model, |m| objective(m).0, &analytic)
}
