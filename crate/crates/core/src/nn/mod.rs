//! Minimal differentiable substrate: the fixed classifier and autoencoder
//! architectures, their losses, Adam, and a finite-difference gradient check.

pub mod autoencoder;
pub mod classifier;
pub mod gradcheck;
pub mod layers;
pub mod loss;
pub mod optim;

use std::hash::{Hash, Hasher};

pub use autoencoder::{Autoencoder, AutoencoderSpec, AutoencoderTrace};
pub use classifier::{Classifier, ClassifierSpec, ClassifierTrace, FeatureTrace};
pub use gradcheck::{finite_difference_check, GradCheck};
pub use loss::{
    cross_entropy_per_sample, l2_reconstruction_loss, mse_grad, weighted_cross_entropy,
};
pub use optim::Adam;

use crate::tensor::Scalar;

/// Slope used by every LeakyReLU in the crate.
pub const LEAKY_SLOPE: f64 = 0.2;

/// Flat access to a model's trainable tensors in a stable order. Backward
/// passes return gradients in the same order.
pub trait Parameters<T> {
    fn params(&self) -> Vec<&[T]>;
    fn params_mut(&mut self) -> Vec<&mut [T]>;
}

/// Order-sensitive hash of every parameter bit pattern.
pub fn param_checksum<T: Scalar, M: Parameters<T>>(model: &M) -> u64 {
    let mut h = std::collections::hash_map::DefaultHasher::new();
    for tensor in model.params() {
        tensor.len().hash(&mut h);
        for v in tensor {
            v.as_f64().to_bits().hash(&mut h);
        }
    }
    h.finish()
}
