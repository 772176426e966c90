use rand::Rng;
use serde::{Deserialize, Serialize};

use super::layers::{
    leaky_relu, leaky_relu_backward, sigmoid, sigmoid_backward, Conv2d, ConvGeometry,
    ConvTranspose2d,
};
use super::{Parameters, LEAKY_SLOPE};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor4};

/// Two strided convolutions down to a `latent_channels x size/4 x size/4`
/// code, mirrored by two transposed convolutions and a sigmoid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AutoencoderSpec {
    pub in_channels: usize,
    pub image_size: usize,
    pub hidden_channels: usize,
    pub latent_channels: usize,
}

impl Default for AutoencoderSpec {
    fn default() -> Self {
        Self {
            in_channels: 1,
            image_size: 32,
            hidden_channels: 8,
            latent_channels: 4,
        }
    }
}

impl AutoencoderSpec {
    /// (channels, height, width) of one encoded episode.
    pub fn latent_shape(&self) -> (usize, usize, usize) {
        (self.latent_channels, self.image_size / 4, self.image_size / 4)
    }

    pub fn latent_len(&self) -> usize {
        let (c, h, w) = self.latent_shape();
        c * h * w
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Autoencoder<T> {
    spec: AutoencoderSpec,
    enc1: Conv2d<T>,
    enc2: Conv2d<T>,
    dec1: ConvTranspose2d<T>,
    dec2: ConvTranspose2d<T>,
}

#[derive(Clone, Debug)]
pub struct AutoencoderTrace<T> {
    input: Tensor4<T>,
    enc1_pre: Tensor4<T>,
    enc1_act: Tensor4<T>,
    latent: Tensor4<T>,
    dec1_pre: Tensor4<T>,
    dec1_act: Tensor4<T>,
    output: Tensor4<T>,
}

impl<T> AutoencoderTrace<T> {
    pub fn output(&self) -> &Tensor4<T> {
        &self.output
    }

    pub fn latent(&self) -> &Tensor4<T> {
        &self.latent
    }
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"EECA";

impl<T: Scalar> Autoencoder<T> {
    pub fn new<R: Rng + ?Sized>(spec: AutoencoderSpec, rng: &mut R) -> Result<Self> {
        if spec.image_size == 0 || spec.image_size % 4 != 0 || spec.hidden_channels == 0 || spec.latent_channels == 0 {
            return Err(Error::InvalidInput(format!("invalid autoencoder spec {spec:?}")));
        }
        let g = ConvGeometry::HALVING;
        Ok(Self {
            spec,
            enc1: Conv2d::new(spec.in_channels, spec.hidden_channels, g, LEAKY_SLOPE, rng),
            // linear code layer
            enc2: Conv2d::new(spec.hidden_channels, spec.latent_channels, g, 1.0, rng),
            dec1: ConvTranspose2d::new(spec.latent_channels, spec.hidden_channels, g, 2.0, rng),
            dec2: ConvTranspose2d::new(spec.hidden_channels, spec.in_channels, g, 1.0, rng),
        })
    }

    pub fn spec(&self) -> AutoencoderSpec {
        self.spec
    }

    fn check_images(&self, x: &Tensor4<T>) -> Result<()> {
        let s = self.spec.image_size;
        if x.shape()[1..] != [self.spec.in_channels, s, s] {
            return Err(Error::Shape(format!(
                "autoencoder expects [n, {}, {s}, {s}], got {:?}",
                self.spec.in_channels,
                x.shape()
            )));
        }
        Ok(())
    }

    fn check_latent(&self, z: &Tensor4<T>) -> Result<()> {
        let (c, h, w) = self.spec.latent_shape();
        if z.shape()[1..] != [c, h, w] {
            return Err(Error::Shape(format!(
                "latent batch must be [n, {c}, {h}, {w}], got {:?}",
                z.shape()
            )));
        }
        Ok(())
    }

    pub fn encode(&self, x: &Tensor4<T>) -> Result<Tensor4<T>> {
        self.check_images(x)?;
        let h = leaky_relu(&self.enc1.forward(x)?, T::of(LEAKY_SLOPE));
        self.enc2.forward(&h)
    }

    /// Decodes a latent batch; output pixels lie in [0, 1].
    pub fn decode(&self, z: &Tensor4<T>) -> Result<Tensor4<T>> {
        self.check_latent(z)?;
        let h = leaky_relu(&self.dec1.forward(z)?, T::of(LEAKY_SLOPE));
        Ok(sigmoid(&self.dec2.forward(&h)?))
    }

    /// Decodes flattened embeddings (each `latent_len` long).
    pub fn decode_flat(&self, embeddings: &[&[T]]) -> Result<Tensor4<T>> {
        let (c, h, w) = self.spec.latent_shape();
        let len = self.spec.latent_len();
        let mut data = Vec::with_capacity(embeddings.len() * len);
        for e in embeddings {
            if e.len() != len {
                return Err(Error::Dimension {
                    expected: len,
                    found: e.len(),
                });
            }
            data.extend_from_slice(e);
        }
        self.decode(&Tensor4::from_vec([embeddings.len(), c, h, w], data)?)
    }

    pub fn forward_trace(&self, x: &Tensor4<T>) -> Result<AutoencoderTrace<T>> {
        self.check_images(x)?;
        let slope = T::of(LEAKY_SLOPE);
        let enc1_pre = self.enc1.forward(x)?;
        let enc1_act = leaky_relu(&enc1_pre, slope);
        let latent = self.enc2.forward(&enc1_act)?;
        let dec1_pre = self.dec1.forward(&latent)?;
        let dec1_act = leaky_relu(&dec1_pre, slope);
        let output = sigmoid(&self.dec2.forward(&dec1_act)?);
        Ok(AutoencoderTrace {
            input: x.clone(),
            enc1_pre,
            enc1_act,
            latent,
            dec1_pre,
            dec1_act,
            output,
        })
    }

    /// Parameter gradients given the gradient with respect to the
    /// reconstruction.
    pub fn backward(&self, trace: &AutoencoderTrace<T>, doutput: &Tensor4<T>) -> Result<Vec<Vec<T>>> {
        if doutput.shape() != trace.output.shape() {
            return Err(Error::Shape("reconstruction gradient shape mismatch".into()));
        }
        let slope = T::of(LEAKY_SLOPE);
        let dz4 = sigmoid_backward(&trace.output, doutput);
        let g4 = self.dec2.backward(&trace.dec1_act, &dz4, true, true)?;
        let dz3 = leaky_relu_backward(&trace.dec1_pre, g4.input.as_ref().expect("requested"), slope);
        let g3 = self.dec1.backward(&trace.latent, &dz3, true, true)?;
        let g2 = self.enc2.backward(&trace.enc1_act, g3.input.as_ref().expect("requested"), true, true)?;
        let dz1 = leaky_relu_backward(&trace.enc1_pre, g2.input.as_ref().expect("requested"), slope);
        let g1 = self.enc1.backward(&trace.input, &dz1, true, false)?;
        let mut grads = Vec::with_capacity(8);
        for g in [g1, g2, g3, g4] {
            grads.push(g.weight.expect("requested"));
            grads.push(g.bias.expect("requested"));
        }
        Ok(grads)
    }

    pub fn cast<U: Scalar>(&self) -> Autoencoder<U> {
        let cv = |v: &[T]| v.iter().map(|x| U::of(x.as_f64())).collect::<Vec<U>>();
        let conv = |c: &Conv2d<T>| Conv2d {
            in_channels: c.in_channels,
            out_channels: c.out_channels,
            geometry: c.geometry,
            weight: cv(&c.weight),
            bias: cv(&c.bias),
        };
        let convt = |c: &ConvTranspose2d<T>| ConvTranspose2d {
            in_channels: c.in_channels,
            out_channels: c.out_channels,
            geometry: c.geometry,
            weight: cv(&c.weight),
            bias: cv(&c.bias),
        };
        Autoencoder {
            spec: self.spec,
            enc1: conv(&self.enc1),
            enc2: conv(&self.enc2),
            dec1: convt(&self.dec1),
            dec2: convt(&self.dec2),
        }
    }
}

impl Autoencoder<f32> {
    /// Checkpoint layout (little-endian): "EECA", four u32 spec fields, then
    /// every parameter tensor as `len u32` followed by `len` f32 values.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = CHECKPOINT_MAGIC.to_vec();
        let s = self.spec;
        for v in [s.in_channels, s.image_size, s.hidden_channels, s.latent_channels] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        for p in self.params() {
            out.extend_from_slice(&(p.len() as u32).to_le_bytes());
            for v in p {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = crate::bytes::ByteReader::new(bytes);
        if cur.take(4)? != CHECKPOINT_MAGIC {
            return Err(Error::Format("bad autoencoder checkpoint magic".into()));
        }
        let mut dims = [0usize; 4];
        for d in &mut dims {
            *d = cur.u32()? as usize;
            if *d == 0 || *d > 4096 {
                return Err(Error::Format(format!("implausible autoencoder dimension {d}")));
            }
        }
        let spec = AutoencoderSpec {
            in_channels: dims[0],
            image_size: dims[1],
            hidden_channels: dims[2],
            latent_channels: dims[3],
        };
        // refuse before allocating when the payload cannot hold the weights
        let k = ConvGeometry::HALVING.kernel * ConvGeometry::HALVING.kernel;
        let (i, h, l) = (spec.in_channels, spec.hidden_channels, spec.latent_channels);
        let values = 2 * (i * h + h * l) * k + 2 * h + l + i;
        if cur.remaining() < values * 4 {
            return Err(Error::Format(format!(
                "checkpoint holds {} bytes, architecture needs at least {}",
                cur.remaining(),
                values * 4
            )));
        }
        // placeholder weights are overwritten below
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        let mut ae = Autoencoder::<f32>::new(spec, &mut rng).map_err(|e| Error::Format(e.to_string()))?;
        for p in ae.params_mut() {
            let len = cur.u32()? as usize;
            if len != p.len() {
                return Err(Error::Format(format!(
                    "checkpoint tensor has {len} values, architecture needs {}",
                    p.len()
                )));
            }
            for v in p.iter_mut() {
                *v = cur.f32()?;
            }
        }
        if !cur.is_empty() {
            return Err(Error::Format("trailing bytes in autoencoder checkpoint".into()));
        }
        Ok(ae)
    }
}

impl<T> Parameters<T> for Autoencoder<T> {
    fn params(&self) -> Vec<&[T]> {
        vec![
            &self.enc1.weight,
            &self.enc1.bias,
            &self.enc2.weight,
            &self.enc2.bias,
            &self.dec1.weight,
            &self.dec1.bias,
            &self.dec2.weight,
            &self.dec2.bias,
        ]
    }

    fn params_mut(&mut self) -> Vec<&mut [T]> {
        vec![
            &mut self.enc1.weight,
            &mut self.enc1.bias,
            &mut self.enc2.weight,
            &mut self.enc2.bias,
            &mut self.dec1.weight,
            &mut self.dec1.bias,
            &mut self.dec2.weight,
            &mut self.dec2.bias,
        ]
    }
}
