use rand::Rng;
use serde::{Deserialize, Serialize};

use super::layers::{leaky_relu, leaky_relu_backward, Conv2d, ConvGeometry, Dense};
use super::{Parameters, LEAKY_SLOPE};
use crate::error::{Error, Result};
use crate::tensor::{FeatureMap, Matrix, Scalar, Tensor4};

/// Three strided convolutions (`width`, `2*width`, `4*width` channels), each
/// followed by LeakyReLU(0.2), then a dense layer over the flattened map.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassifierSpec {
    pub in_channels: usize,
    pub image_size: usize,
    pub width: usize,
}

impl Default for ClassifierSpec {
    fn default() -> Self {
        Self {
            in_channels: 1,
            image_size: 32,
            width: 32,
        }
    }
}

impl ClassifierSpec {
    pub const CONV_LAYERS: usize = 3;

    fn channels(&self) -> [usize; 4] {
        [self.in_channels, self.width, self.width * 2, self.width * 4]
    }

    fn final_size(&self) -> usize {
        self.image_size >> Self::CONV_LAYERS
    }

    pub fn flat_features(&self) -> usize {
        self.width * 4 * self.final_size() * self.final_size()
    }
}

/// Weight and bias gradients of one layer.
type LayerGrads<T> = (Vec<T>, Vec<T>);

#[derive(Clone, Debug, PartialEq)]
pub struct Classifier<T> {
    spec: ClassifierSpec,
    convs: Vec<Conv2d<T>>,
    head: Dense<T>,
}

/// Intermediate values of a forward pass up to some conv layer.
#[derive(Clone, Debug)]
pub struct FeatureTrace<T> {
    /// `inputs[l]` feeds conv `l`; `inputs[0]` is the image batch.
    inputs: Vec<Tensor4<T>>,
    pre: Vec<Tensor4<T>>,
    features: Tensor4<T>,
}

impl<T: Scalar> FeatureTrace<T> {
    pub fn features(&self) -> &FeatureMap<T> {
        &self.features
    }

    /// Every captured activation (post-LeakyReLU), in layer order.
    pub fn activations(&self) -> impl Iterator<Item = &Tensor4<T>> {
        self.inputs[1..].iter().chain(std::iter::once(&self.features))
    }
}

#[derive(Clone, Debug)]
pub struct ClassifierTrace<T> {
    conv: FeatureTrace<T>,
    logits: Matrix<T>,
}

impl<T: Scalar> ClassifierTrace<T> {
    pub fn logits(&self) -> &Matrix<T> {
        &self.logits
    }

    pub fn conv(&self) -> &FeatureTrace<T> {
        &self.conv
    }
}

impl<T: Scalar> Classifier<T> {
    pub fn new<R: Rng + ?Sized>(spec: ClassifierSpec, num_classes: usize, rng: &mut R) -> Result<Self> {
        if num_classes == 0 {
            return Err(Error::InvalidInput("classifier needs at least one class".into()));
        }
        if spec.width == 0 || spec.image_size == 0 || spec.image_size % (1 << ClassifierSpec::CONV_LAYERS) != 0 {
            return Err(Error::InvalidInput(format!(
                "image size {} must be a positive multiple of 8",
                spec.image_size
            )));
        }
        let ch = spec.channels();
        let convs = (0..ClassifierSpec::CONV_LAYERS)
            .map(|l| Conv2d::new(ch[l], ch[l + 1], ConvGeometry::HALVING, LEAKY_SLOPE, rng))
            .collect();
        let head = Dense::new(spec.flat_features(), num_classes, rng);
        Ok(Self { spec, convs, head })
    }

    pub fn spec(&self) -> ClassifierSpec {
        self.spec
    }

    pub fn num_classes(&self) -> usize {
        self.head.out_dim
    }

    pub fn head(&self) -> &Dense<T> {
        &self.head
    }

    /// Replaces the output layer with all-zero weights and biases.
    pub fn zero_head(&mut self) {
        self.head = Dense::zeroed(self.head.in_dim, self.head.out_dim);
    }

    /// Grows the output layer to `num_classes` units; existing weights are
    /// not modified.
    pub fn expand_head<R: Rng + ?Sized>(&mut self, num_classes: usize, rng: &mut R) {
        if num_classes > self.head.out_dim {
            self.head.grow(num_classes - self.head.out_dim, rng);
        }
    }

    fn check_input(&self, x: &Tensor4<T>) -> Result<()> {
        let [_, c, h, w] = x.shape();
        let s = self.spec.image_size;
        if c != self.spec.in_channels || h != s || w != s {
            return Err(Error::Shape(format!(
                "classifier expects [n, {}, {s}, {s}], got {:?}",
                self.spec.in_channels,
                x.shape()
            )));
        }
        Ok(())
    }

    fn check_layer(layer: usize) -> Result<()> {
        if !(1..=ClassifierSpec::CONV_LAYERS).contains(&layer) {
            return Err(Error::InvalidInput(format!(
                "feature layer {layer} outside 1..={}",
                ClassifierSpec::CONV_LAYERS
            )));
        }
        Ok(())
    }

    /// Runs convolutions `1..=layer`, keeping what backward needs.
    pub fn feature_trace(&self, x: &Tensor4<T>, layer: usize) -> Result<FeatureTrace<T>> {
        self.check_input(x)?;
        Self::check_layer(layer)?;
        let slope = T::of(LEAKY_SLOPE);
        let mut inputs = vec![x.clone()];
        let mut pre = Vec::with_capacity(layer);
        for conv in &self.convs[..layer] {
            let z = conv.forward(inputs.last().expect("non-empty"))?;
            let a = leaky_relu(&z, slope);
            pre.push(z);
            inputs.push(a);
        }
        let features = inputs.pop().expect("at least one layer ran");
        Ok(FeatureTrace {
            inputs,
            pre,
            features,
        })
    }

    /// Post-activation output of conv `layer` (1-based; 3 is the last).
    pub fn features(&self, x: &Tensor4<T>, layer: usize) -> Result<FeatureMap<T>> {
        Ok(self.feature_trace(x, layer)?.features)
    }

    pub fn forward_trace(&self, x: &Tensor4<T>) -> Result<ClassifierTrace<T>> {
        let conv = self.feature_trace(x, ClassifierSpec::CONV_LAYERS)?;
        let logits = self.head.forward(conv.features.data(), x.count())?;
        Ok(ClassifierTrace { conv, logits })
    }

    pub fn forward(&self, x: &Tensor4<T>) -> Result<Matrix<T>> {
        Ok(self.forward_trace(x)?.logits)
    }

    /// Gradient of a loss with respect to the input images, given its
    /// gradient with respect to the traced feature map. Parameter gradients
    /// are skipped.
    pub fn feature_input_grad(&self, trace: &FeatureTrace<T>, dfeat: &Tensor4<T>) -> Result<Tensor4<T>> {
        let (_, dx) = self.conv_backward(trace, dfeat.clone(), false)?;
        Ok(dx)
    }

    /// Returns per-layer (dW, db) in forward order plus the input gradient.
    fn conv_backward(
        &self,
        trace: &FeatureTrace<T>,
        mut grad: Tensor4<T>,
        want_params: bool,
    ) -> Result<(Vec<LayerGrads<T>>, Tensor4<T>)> {
        let slope = T::of(LEAKY_SLOPE);
        let depth = trace.pre.len();
        let mut params = Vec::with_capacity(depth);
        for l in (0..depth).rev() {
            let dz = leaky_relu_backward(&trace.pre[l], &grad, slope);
            let need_input = l > 0 || !want_params;
            let g = self.convs[l].backward(&trace.inputs[l], &dz, want_params, need_input)?;
            if let (Some(w), Some(b)) = (g.weight, g.bias) {
                params.push((w, b));
            }
            grad = match g.input {
                Some(dx) => dx,
                None => Tensor4::zeros(trace.inputs[0].shape()),
            };
        }
        params.reverse();
        Ok((params, grad))
    }

    /// Parameter gradients for a loss whose logit gradient is `dlogits`.
    pub fn backward(&self, trace: &ClassifierTrace<T>, dlogits: &Matrix<T>) -> Result<Vec<Vec<T>>> {
        if dlogits.rows != trace.logits.rows || dlogits.cols != trace.logits.cols {
            return Err(Error::Shape("logit gradient shape mismatch".into()));
        }
        let (dw, db, dx) = self.head.backward(trace.conv.features.data(), dlogits);
        let dfeat = Tensor4::from_vec(trace.conv.features.shape(), dx)?;
        let (convs, _) = self.conv_backward(&trace.conv, dfeat, true)?;
        let mut grads = Vec::with_capacity(2 * convs.len() + 2);
        for (w, b) in convs {
            grads.push(w);
            grads.push(b);
        }
        grads.push(dw);
        grads.push(db);
        Ok(grads)
    }

    /// Argmax over the first `limit` logits, evaluated in chunks.
    pub fn predict(&self, x: &Tensor4<T>, limit: usize) -> Result<Vec<usize>> {
        let mut out = Vec::with_capacity(x.count());
        for start in (0..x.count()).step_by(256) {
            let idx: Vec<usize> = (start..(start + 256).min(x.count())).collect();
            let logits = self.forward(&x.select(&idx))?;
            out.extend((0..logits.rows).map(|r| logits.argmax_row(r, limit)));
        }
        Ok(out)
    }

    pub fn cast<U: Scalar>(&self) -> Classifier<U> {
        let conv = |c: &Conv2d<T>| Conv2d {
            in_channels: c.in_channels,
            out_channels: c.out_channels,
            geometry: c.geometry,
            weight: c.weight.iter().map(|v| U::of(v.as_f64())).collect(),
            bias: c.bias.iter().map(|v| U::of(v.as_f64())).collect(),
        };
        Classifier {
            spec: self.spec,
            convs: self.convs.iter().map(conv).collect(),
            head: Dense {
                in_dim: self.head.in_dim,
                out_dim: self.head.out_dim,
                weight: self.head.weight.iter().map(|v| U::of(v.as_f64())).collect(),
                bias: self.head.bias.iter().map(|v| U::of(v.as_f64())).collect(),
            },
        }
    }
}

impl<T> Parameters<T> for Classifier<T> {
    fn params(&self) -> Vec<&[T]> {
        let mut out: Vec<&[T]> = Vec::new();
        for c in &self.convs {
            out.push(&c.weight);
            out.push(&c.bias);
        }
        out.push(&self.head.weight);
        out.push(&self.head.bias);
        out
    }

    fn params_mut(&mut self) -> Vec<&mut [T]> {
        let mut out: Vec<&mut [T]> = Vec::new();
        for c in &mut self.convs {
            out.push(&mut c.weight);
            out.push(&mut c.bias);
        }
        out.push(&mut self.head.weight);
        out.push(&mut self.head.bias);
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_spec() -> ClassifierSpec {
        ClassifierSpec {
            in_channels: 1,
            image_size: 16,
            width: 4,
        }
    }

    fn batch(n: usize, size: usize, seed: u64) -> Tensor4<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let len = n * size * size;
        Tensor4::from_vec([n, 1, size, size], (0..len).map(|_| rng.gen()).collect()).unwrap()
    }

    #[test]
    fn zero_head_gives_zero_logits() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut c = Classifier::<f32>::new(small_spec(), 3, &mut rng).unwrap();
        c.zero_head();
        let logits = c.forward(&batch(5, 16, 1)).unwrap();
        assert_eq!((logits.rows, logits.cols), (5, 3));
        assert!(logits.data.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn forward_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let c = Classifier::<f32>::new(ClassifierSpec::default(), 10, &mut rng).unwrap();
        let x = batch(3, 32, 2);
        let a = c.forward(&x).unwrap();
        let b = c.forward(&x).unwrap();
        assert!(a.data.iter().zip(&b.data).all(|(p, q)| p.to_bits() == q.to_bits()));
        assert_eq!(a.rows, 3);
    }

    #[test]
    fn rejects_wrong_image_size() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let c = Classifier::<f32>::new(ClassifierSpec::default(), 2, &mut rng).unwrap();
        assert!(matches!(c.forward(&batch(1, 16, 0)), Err(Error::Shape(_))));
    }

    #[test]
    fn features_match_activation_captured_by_full_forward() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let c = Classifier::<f32>::new(small_spec(), 4, &mut rng).unwrap();
        let x = batch(2, 16, 9);
        let full = c.forward_trace(&x).unwrap();
        for layer in 1..=3 {
            let f = c.features(&x, layer).unwrap();
            let captured = full.conv().activations().nth(layer - 1).unwrap();
            assert_eq!(&f, captured);
            assert_eq!(f.count(), 2);
        }
        assert!(c.features(&x, 0).is_err());
        assert!(c.features(&x, 4).is_err());
    }

    #[test]
    fn expand_head_preserves_old_logits() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut c = Classifier::<f32>::new(small_spec(), 2, &mut rng).unwrap();
        let x = batch(4, 16, 3);
        let before = c.forward(&x).unwrap();
        c.expand_head(5, &mut rng);
        let after = c.forward(&x).unwrap();
        assert_eq!(after.cols, 5);
        for r in 0..4 {
            assert_eq!(&after.row(r)[..2], before.row(r));
        }
    }
}
