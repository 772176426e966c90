//! Convolution, transposed convolution and dense layers with hand-written
//! backward passes. Convolutions lower to a single GEMM over an im2col buffer
//! that spans the whole batch.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{Matrix, Scalar, Tensor4};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    /// Kernel 4, stride 2, padding 1: halves (or, transposed, doubles) the
    /// spatial size.
    pub const HALVING: ConvGeometry = ConvGeometry {
        kernel: 4,
        stride: 2,
        padding: 1,
    };

    pub fn conv_out(&self, size: usize) -> Option<usize> {
        let padded = size + 2 * self.padding;
        if padded < self.kernel {
            return None;
        }
        Some((padded - self.kernel) / self.stride + 1)
    }

    pub fn transpose_out(&self, size: usize) -> Option<usize> {
        if size == 0 {
            return None;
        }
        ((size - 1) * self.stride + self.kernel).checked_sub(2 * self.padding)
    }
}

/// Image-plane geometry for the im2col/col2im pair: an image of `channels x
/// height x width` sampled on an `out_h x out_w` grid.
#[derive(Clone, Copy, Debug)]
struct Lowering {
    channels: usize,
    height: usize,
    width: usize,
    out_h: usize,
    out_w: usize,
    g: ConvGeometry,
}

impl Lowering {
    fn rows(&self) -> usize {
        self.channels * self.g.kernel * self.g.kernel
    }

    fn grid(&self) -> usize {
        self.out_h * self.out_w
    }

    /// Source pixel offset for a (channel, kernel row, kernel col, out row,
    /// out col) tuple, if it lands inside the image.
    #[inline]
    fn source(&self, c: usize, ki: usize, kj: usize, oi: usize, oj: usize) -> Option<usize> {
        let i = (oi * self.g.stride + ki).checked_sub(self.g.padding)?;
        let j = (oj * self.g.stride + kj).checked_sub(self.g.padding)?;
        if i >= self.height || j >= self.width {
            return None;
        }
        Some((c * self.height + i) * self.width + j)
    }

    /// Writes the lowered image into columns `[offset, offset + grid)` of a
    /// row-major buffer whose rows are `stride` long.
    fn im2col<T: Scalar>(&self, img: &[T], col: &mut [T], stride: usize, offset: usize) {
        let k = self.g.kernel;
        for c in 0..self.channels {
            for ki in 0..k {
                for kj in 0..k {
                    let row = (c * k + ki) * k + kj;
                    let base = row * stride + offset;
                    for oi in 0..self.out_h {
                        for oj in 0..self.out_w {
                            col[base + oi * self.out_w + oj] = match self.source(c, ki, kj, oi, oj) {
                                Some(src) => img[src],
                                None => T::zero(),
                            };
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of [`Lowering::im2col`]: accumulates columns back into `img`.
    fn col2im<T: Scalar>(&self, col: &[T], stride: usize, offset: usize, img: &mut [T]) {
        let k = self.g.kernel;
        for c in 0..self.channels {
            for ki in 0..k {
                for kj in 0..k {
                    let row = (c * k + ki) * k + kj;
                    let base = row * stride + offset;
                    for oi in 0..self.out_h {
                        for oj in 0..self.out_w {
                            if let Some(dst) = self.source(c, ki, kj, oi, oj) {
                                img[dst] += col[base + oi * self.out_w + oj];
                            }
                        }
                    }
                }
            }
        }
    }
}

fn normal_init<T: Scalar, R: Rng + ?Sized>(len: usize, std: f64, rng: &mut R) -> Vec<T> {
    let dist = Normal::new(0.0, std).expect("positive std");
    (0..len).map(|_| T::of(dist.sample(rng))).collect()
}

/// Gathers `[n, c, p]` into channel-major `[c, n * p]`.
fn to_channel_major<T: Scalar>(x: &[T], n: usize, c: usize, p: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for i in 0..n {
        for ch in 0..c {
            let src = &x[(i * c + ch) * p..(i * c + ch + 1) * p];
            out[ch * n * p + i * p..ch * n * p + (i + 1) * p].copy_from_slice(src);
        }
    }
    out
}

fn from_channel_major<T: Scalar>(x: &[T], n: usize, c: usize, p: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for ch in 0..c {
        for i in 0..n {
            let src = &x[ch * n * p + i * p..ch * n * p + (i + 1) * p];
            out[(i * c + ch) * p..(i * c + ch + 1) * p].copy_from_slice(src);
        }
    }
    out
}

/// Gradients produced by a layer's backward pass. Parameter gradients are
/// only computed when requested.
#[derive(Clone, Debug)]
pub struct LayerGrads<T> {
    pub weight: Option<Vec<T>>,
    pub bias: Option<Vec<T>>,
    pub input: Option<Tensor4<T>>,
}

/// 2-D convolution. Weights are `[out, in, k, k]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d<T> {
    pub in_channels: usize,
    pub out_channels: usize,
    pub geometry: ConvGeometry,
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Scalar> Conv2d<T> {
    /// He-normal initialisation for a LeakyReLU with the given slope.
    pub fn new<R: Rng + ?Sized>(
        in_channels: usize,
        out_channels: usize,
        geometry: ConvGeometry,
        leaky_slope: f64,
        rng: &mut R,
    ) -> Self {
        let fan_in = in_channels * geometry.kernel * geometry.kernel;
        let std = (2.0 / ((1.0 + leaky_slope * leaky_slope) * fan_in as f64)).sqrt();
        Self {
            in_channels,
            out_channels,
            geometry,
            weight: normal_init(out_channels * fan_in, std, rng),
            bias: vec![T::zero(); out_channels],
        }
    }

    fn lowering(&self, x: &Tensor4<T>) -> Result<Lowering> {
        let [_, c, h, w] = x.shape();
        if c != self.in_channels {
            return Err(Error::Shape(format!(
                "conv expects {} input channels, got {c}",
                self.in_channels
            )));
        }
        let (out_h, out_w) = match (self.geometry.conv_out(h), self.geometry.conv_out(w)) {
            (Some(a), Some(b)) => (a, b),
            _ => return Err(Error::Shape(format!("{h}x{w} input too small for conv"))),
        };
        Ok(Lowering {
            channels: c,
            height: h,
            width: w,
            out_h,
            out_w,
            g: self.geometry,
        })
    }

    fn lower_batch(&self, x: &Tensor4<T>, low: &Lowering) -> Vec<T> {
        let n = x.count();
        let stride = n * low.grid();
        let mut col = vec![T::zero(); low.rows() * stride];
        for i in 0..n {
            low.im2col(x.item(i), &mut col, stride, i * low.grid());
        }
        col
    }

    pub fn forward(&self, x: &Tensor4<T>) -> Result<Tensor4<T>> {
        let low = self.lowering(x)?;
        let n = x.count();
        let p = low.grid();
        let col = self.lower_batch(x, &low);
        let np = n * p;
        let mut out_cm = vec![T::zero(); self.out_channels * np];
        T::gemm(
            self.out_channels,
            low.rows(),
            np,
            T::one(),
            &self.weight,
            (low.rows(), 1),
            &col,
            (np, 1),
            T::zero(),
            &mut out_cm,
            (np, 1),
        );
        for (co, b) in self.bias.iter().enumerate() {
            for v in &mut out_cm[co * np..(co + 1) * np] {
                *v += *b;
            }
        }
        let data = from_channel_major(&out_cm, n, self.out_channels, p);
        Tensor4::from_vec([n, self.out_channels, low.out_h, low.out_w], data)
    }

    pub fn backward(
        &self,
        x: &Tensor4<T>,
        dout: &Tensor4<T>,
        want_params: bool,
        want_input: bool,
    ) -> Result<LayerGrads<T>> {
        let low = self.lowering(x)?;
        let n = x.count();
        let p = low.grid();
        let np = n * p;
        if dout.shape() != [n, self.out_channels, low.out_h, low.out_w] {
            return Err(Error::Shape(format!(
                "conv output gradient has shape {:?}",
                dout.shape()
            )));
        }
        let dout_cm = to_channel_major(dout.data(), n, self.out_channels, p);
        let rows = low.rows();

        let (weight, bias) = if want_params {
            let col = self.lower_batch(x, &low);
            let mut dw = vec![T::zero(); self.out_channels * rows];
            T::gemm(
                self.out_channels,
                np,
                rows,
                T::one(),
                &dout_cm,
                (np, 1),
                &col,
                (1, np),
                T::zero(),
                &mut dw,
                (rows, 1),
            );
            let db = (0..self.out_channels)
                .map(|co| dout_cm[co * np..(co + 1) * np].iter().copied().sum())
                .collect();
            (Some(dw), Some(db))
        } else {
            (None, None)
        };

        let input = if want_input {
            let mut dcol = vec![T::zero(); rows * np];
            T::gemm(
                rows,
                self.out_channels,
                np,
                T::one(),
                &self.weight,
                (1, rows),
                &dout_cm,
                (np, 1),
                T::zero(),
                &mut dcol,
                (np, 1),
            );
            let mut dx = Tensor4::zeros(x.shape());
            for i in 0..n {
                low.col2im(&dcol, np, i * p, dx.item_mut(i));
            }
            Some(dx)
        } else {
            None
        };

        Ok(LayerGrads {
            weight,
            bias,
            input,
        })
    }
}

/// Transposed 2-D convolution (the adjoint of [`Conv2d`] with the same
/// geometry). Weights are `[in, out, k, k]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvTranspose2d<T> {
    pub in_channels: usize,
    pub out_channels: usize,
    pub geometry: ConvGeometry,
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Scalar> ConvTranspose2d<T> {
    pub fn new<R: Rng + ?Sized>(
        in_channels: usize,
        out_channels: usize,
        geometry: ConvGeometry,
        gain: f64,
        rng: &mut R,
    ) -> Self {
        let kk = geometry.kernel * geometry.kernel;
        // each output pixel receives in_channels * (k / stride)^2 taps
        let taps = (in_channels * kk) as f64 / (geometry.stride * geometry.stride) as f64;
        let std = (gain / taps).sqrt();
        Self {
            in_channels,
            out_channels,
            geometry,
            weight: normal_init(in_channels * out_channels * kk, std, rng),
            bias: vec![T::zero(); out_channels],
        }
    }

    fn lowering(&self, x: &Tensor4<T>) -> Result<Lowering> {
        let [_, c, h, w] = x.shape();
        if c != self.in_channels {
            return Err(Error::Shape(format!(
                "transposed conv expects {} input channels, got {c}",
                self.in_channels
            )));
        }
        let (height, width) = match (
            self.geometry.transpose_out(h),
            self.geometry.transpose_out(w),
        ) {
            (Some(a), Some(b)) => (a, b),
            _ => return Err(Error::Shape(format!("{h}x{w} input invalid for transposed conv"))),
        };
        Ok(Lowering {
            channels: self.out_channels,
            height,
            width,
            out_h: h,
            out_w: w,
            g: self.geometry,
        })
    }

    pub fn forward(&self, x: &Tensor4<T>) -> Result<Tensor4<T>> {
        let low = self.lowering(x)?;
        let n = x.count();
        let p = low.grid();
        let np = n * p;
        let rows = low.rows();
        let x_cm = to_channel_major(x.data(), n, self.in_channels, p);
        let mut col = vec![T::zero(); rows * np];
        T::gemm(
            rows,
            self.in_channels,
            np,
            T::one(),
            &self.weight,
            (1, rows),
            &x_cm,
            (np, 1),
            T::zero(),
            &mut col,
            (np, 1),
        );
        let mut out = Tensor4::zeros([n, self.out_channels, low.height, low.width]);
        let plane = low.height * low.width;
        for i in 0..n {
            let img = out.item_mut(i);
            low.col2im(&col, np, i * p, img);
            for (co, b) in self.bias.iter().enumerate() {
                for v in &mut img[co * plane..(co + 1) * plane] {
                    *v += *b;
                }
            }
        }
        Ok(out)
    }

    pub fn backward(
        &self,
        x: &Tensor4<T>,
        dout: &Tensor4<T>,
        want_params: bool,
        want_input: bool,
    ) -> Result<LayerGrads<T>> {
        let low = self.lowering(x)?;
        let n = x.count();
        let p = low.grid();
        let np = n * p;
        let rows = low.rows();
        if dout.shape() != [n, self.out_channels, low.height, low.width] {
            return Err(Error::Shape(format!(
                "transposed conv output gradient has shape {:?}",
                dout.shape()
            )));
        }
        let mut dcol = vec![T::zero(); rows * np];
        for i in 0..n {
            low.im2col(dout.item(i), &mut dcol, np, i * p);
        }

        let (weight, bias) = if want_params {
            let x_cm = to_channel_major(x.data(), n, self.in_channels, p);
            let mut dw = vec![T::zero(); self.in_channels * rows];
            T::gemm(
                self.in_channels,
                np,
                rows,
                T::one(),
                &x_cm,
                (np, 1),
                &dcol,
                (1, np),
                T::zero(),
                &mut dw,
                (rows, 1),
            );
            let plane = low.height * low.width;
            let mut db = vec![T::zero(); self.out_channels];
            for i in 0..n {
                let g = dout.item(i);
                for (co, acc) in db.iter_mut().enumerate() {
                    *acc += g[co * plane..(co + 1) * plane].iter().copied().sum::<T>();
                }
            }
            (Some(dw), Some(db))
        } else {
            (None, None)
        };

        let input = if want_input {
            let mut dx_cm = vec![T::zero(); self.in_channels * np];
            T::gemm(
                self.in_channels,
                rows,
                np,
                T::one(),
                &self.weight,
                (rows, 1),
                &dcol,
                (np, 1),
                T::zero(),
                &mut dx_cm,
                (np, 1),
            );
            let data = from_channel_major(&dx_cm, n, self.in_channels, p);
            Some(Tensor4::from_vec(x.shape(), data)?)
        } else {
            None
        };

        Ok(LayerGrads {
            weight,
            bias,
            input,
        })
    }
}

/// Fully connected layer, weights `[out, in]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense<T> {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Scalar> Dense<T> {
    pub fn new<R: Rng + ?Sized>(in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        Self {
            in_dim,
            out_dim,
            weight: normal_init(in_dim * out_dim, (1.0 / in_dim as f64).sqrt(), rng),
            bias: vec![T::zero(); out_dim],
        }
    }

    pub fn zeroed(in_dim: usize, out_dim: usize) -> Self {
        Self {
            in_dim,
            out_dim,
            weight: vec![T::zero(); in_dim * out_dim],
            bias: vec![T::zero(); out_dim],
        }
    }

    /// Appends `extra` output units. Existing rows are left untouched.
    pub fn grow<R: Rng + ?Sized>(&mut self, extra: usize, rng: &mut R) {
        let fresh: Vec<T> = normal_init(self.in_dim * extra, (1.0 / self.in_dim as f64).sqrt(), rng);
        self.weight.extend(fresh);
        self.bias.extend(std::iter::repeat(T::zero()).take(extra));
        self.out_dim += extra;
    }

    /// `x` holds `rows` inputs of length `in_dim`.
    pub fn forward(&self, x: &[T], rows: usize) -> Result<Matrix<T>> {
        if x.len() != rows * self.in_dim {
            return Err(Error::Shape(format!(
                "dense layer expects {} inputs per row",
                self.in_dim
            )));
        }
        let mut out = Matrix::zeros(rows, self.out_dim);
        for r in 0..rows {
            out.row_mut(r).copy_from_slice(&self.bias);
        }
        T::gemm(
            rows,
            self.in_dim,
            self.out_dim,
            T::one(),
            x,
            (self.in_dim, 1),
            &self.weight,
            (1, self.in_dim),
            T::one(),
            &mut out.data,
            (self.out_dim, 1),
        );
        Ok(out)
    }

    /// Returns (dW, db, dx).
    pub fn backward(&self, x: &[T], dy: &Matrix<T>) -> (Vec<T>, Vec<T>, Vec<T>) {
        let rows = dy.rows;
        let mut dw = vec![T::zero(); self.weight.len()];
        T::gemm(
            self.out_dim,
            rows,
            self.in_dim,
            T::one(),
            &dy.data,
            (1, self.out_dim),
            x,
            (self.in_dim, 1),
            T::zero(),
            &mut dw,
            (self.in_dim, 1),
        );
        let mut db = vec![T::zero(); self.out_dim];
        for r in 0..rows {
            for (acc, g) in db.iter_mut().zip(dy.row(r)) {
                *acc += *g;
            }
        }
        let mut dx = vec![T::zero(); rows * self.in_dim];
        T::gemm(
            rows,
            self.out_dim,
            self.in_dim,
            T::one(),
            &dy.data,
            (self.out_dim, 1),
            &self.weight,
            (self.in_dim, 1),
            T::zero(),
            &mut dx,
            (self.in_dim, 1),
        );
        (dw, db, dx)
    }
}

pub fn leaky_relu<T: Scalar>(x: &Tensor4<T>, slope: T) -> Tensor4<T> {
    let mut out = x.clone();
    for v in out.data_mut() {
        if *v < T::zero() {
            *v *= slope;
        }
    }
    out
}

/// `pre` is the activation input.
pub fn leaky_relu_backward<T: Scalar>(pre: &Tensor4<T>, dy: &Tensor4<T>, slope: T) -> Tensor4<T> {
    let mut dx = dy.clone();
    for (g, z) in dx.data_mut().iter_mut().zip(pre.data()) {
        if *z < T::zero() {
            *g *= slope;
        }
    }
    dx
}

pub fn sigmoid<T: Scalar>(x: &Tensor4<T>) -> Tensor4<T> {
    let mut out = x.clone();
    for v in out.data_mut() {
        *v = T::one() / (T::one() + (-*v).exp());
    }
    out
}

/// `out` is the sigmoid output.
pub fn sigmoid_backward<T: Scalar>(out: &Tensor4<T>, dy: &Tensor4<T>) -> Tensor4<T> {
    let mut dx = dy.clone();
    for (g, s) in dx.data_mut().iter_mut().zip(out.data()) {
        *g *= *s * (T::one() - *s);
    }
    dx
}
