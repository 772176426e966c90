use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{ClassId, LabeledDataset, Split};
use crate::error::{Error, Result};
use crate::seed::derive_seed;
use crate::tensor::Tensor4;

const INK: f32 = 0.9;

/// Noise-free template for `class` (0..10) on a `size x size` canvas.
pub fn glyph(class: ClassId, size: usize) -> Vec<f32> {
    let mut out = vec![0.0; size * size];
    for r in 0..size {
        for c in 0..size {
            // pixel centres in [0, 1)
            let v = (r as f32 + 0.5) / size as f32;
            let u = (c as f32 + 0.5) / size as f32;
            let (du, dv) = (u - 0.5, v - 0.5);
            let radius = (du * du + dv * dv).sqrt();
            let on = match class {
                0 => dv.abs() < 0.1 && du.abs() < 0.35,
                1 => du.abs() < 0.1 && dv.abs() < 0.35,
                2 => (u - v).abs() < 0.09 && radius < 0.4,
                3 => (u + v - 1.0).abs() < 0.09 && radius < 0.4,
                4 => radius < 0.22,
                5 => (0.25..0.37).contains(&radius),
                6 => {
                    (u < 0.55 && u > 0.15 && (v - 0.2).abs() < 0.07)
                        || (v < 0.55 && v > 0.15 && (u - 0.2).abs() < 0.07)
                }
                7 => {
                    (u > 0.45 && u < 0.85 && (v - 0.8).abs() < 0.07)
                        || (v > 0.45 && v < 0.85 && (u - 0.8).abs() < 0.07)
                }
                8 => (du.abs() < 0.07 || dv.abs() < 0.07) && du.abs() < 0.35 && dv.abs() < 0.35,
                9 => {
                    let m = du.abs().max(dv.abs());
                    (0.25..0.33).contains(&m)
                }
                _ => false,
            };
            if on {
                out[r * size + c] = INK;
            }
        }
    }
    out
}

fn render(num_classes: usize, per_class: usize, size: usize, noise: f64, seed: u64, split: Split) -> Result<LabeledDataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dist = Normal::new(0.0, noise.max(0.0)).map_err(|e| Error::InvalidInput(e.to_string()))?;
    let plane = size * size;
    let mut data = Vec::with_capacity(num_classes * per_class * plane);
    let mut labels = Vec::with_capacity(num_classes * per_class);
    let templates: Vec<Vec<f32>> = (0..num_classes as ClassId).map(|c| glyph(c, size)).collect();
    // interleave classes so that per-class prefixes stay balanced
    for _ in 0..per_class {
        for (class, tpl) in templates.iter().enumerate() {
            for &base in tpl {
                let v = if noise > 0.0 {
                    base as f64 + dist.sample(&mut rng)
                } else {
                    base as f64
                };
                // quantize to the 8-bit grid so IDX export is lossless
                data.push((v.clamp(0.0, 1.0) * 255.0).round() as f32 / 255.0);
            }
            labels.push(class as ClassId);
        }
    }
    let images = Tensor4::from_vec([labels.len(), 1, size, size], data)?;
    LabeledDataset::new(images, labels, split)
}

/// Deterministic glyph classes plus clamped Gaussian pixel noise. Train and
/// test sets (both `per_class` images per class) use disjoint noise streams.
pub fn make_synthetic(
    num_classes: usize,
    per_class: usize,
    image_size: usize,
    noise_level: f64,
    seed: u64,
) -> Result<(LabeledDataset, LabeledDataset)> {
    if num_classes == 0 || num_classes > 10 {
        return Err(Error::InvalidInput(format!("num_classes {num_classes} outside 1..=10")));
    }
    if image_size != 16 && image_size != 32 {
        return Err(Error::InvalidInput(format!("image_size {image_size} must be 16 or 32")));
    }
    if !(noise_level.is_finite() && noise_level >= 0.0) {
        return Err(Error::InvalidInput(format!("noise level {noise_level} must be >= 0")));
    }
    let train = render(num_classes, per_class, image_size, noise_level, derive_seed(seed, &[1]), Split::Train)?;
    let test = render(num_classes, per_class, image_size, noise_level, derive_seed(seed, &[2]), Split::Test)?;
    Ok((train, test))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn glyphs_are_distinct_and_nonempty() {
        for size in [16, 32] {
            let all: Vec<Vec<f32>> = (0..10).map(|c| glyph(c, size)).collect();
            for (i, a) in all.iter().enumerate() {
                assert!(a.iter().any(|v| *v > 0.0), "class {i} empty at {size}");
                for b in &all[i + 1..] {
                    assert_ne!(a, b);
                }
            }
        }
    }

    #[test]
    fn zero_noise_images_are_identical_per_class() {
        let (train, _) = make_synthetic(4, 5, 32, 0.0, 3).unwrap();
        for i in 0..train.len() {
            let first = train.labels.iter().position(|l| *l == train.labels[i]).unwrap();
            assert_eq!(train.images.item(i), train.images.item(first));
        }
    }

    #[test]
    fn same_seed_same_data_and_disjoint_noise() {
        let a = make_synthetic(3, 4, 16, 0.2, 11).unwrap();
        let b = make_synthetic(3, 4, 16, 0.2, 11).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.0.images, a.1.images);
        assert_eq!(a.1.split, Split::Test);
    }

    #[test]
    fn rejects_bad_arguments() {
        assert!(make_synthetic(11, 1, 32, 0.1, 0).is_err());
        assert!(make_synthetic(2, 1, 28, 0.1, 0).is_err());
        assert!(make_synthetic(2, 1, 32, -0.1, 0).is_err());
    }
}
