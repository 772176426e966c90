use std::fs;
use std::io::Write;
use std::path::Path;

use super::{ClassId, LabeledDataset, Split};
use crate::bytes::ByteReader;
use crate::error::{Error, Result};
use crate::tensor::{ImageBatch, Tensor4};

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

/// Raw contents of an IDX image file.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IdxImages {
    pub count: usize,
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<u8>,
}

fn expect_magic(found: u32, want: u32, what: &str) -> Result<()> {
    if found != want {
        return Err(Error::Format(format!(
            "{what} file has magic {found:#010x}, expected {want:#010x}"
        )));
    }
    Ok(())
}

fn expect_end(cur: &ByteReader<'_>, what: &str) -> Result<()> {
    if !cur.is_empty() {
        return Err(Error::Format(format!(
            "{} unexpected trailing bytes in {what} file",
            cur.remaining()
        )));
    }
    Ok(())
}

/// Parses a big-endian IDX3 image file.
pub fn parse_idx_images(bytes: &[u8]) -> Result<IdxImages> {
    let mut cur = ByteReader::new(bytes);
    expect_magic(cur.u32_be()?, IMAGES_MAGIC, "image")?;
    let count = cur.u32_be()? as usize;
    let rows = cur.u32_be()? as usize;
    let cols = cur.u32_be()? as usize;
    let len = count
        .checked_mul(rows)
        .and_then(|v| v.checked_mul(cols))
        .ok_or_else(|| Error::Format(format!("image header {count}x{rows}x{cols} overflows")))?;
    let pixels = cur.take(len)?.to_vec();
    expect_end(&cur, "image")?;
    Ok(IdxImages {
        count,
        rows,
        cols,
        pixels,
    })
}

/// Parses a big-endian IDX1 label file.
pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    let mut cur = ByteReader::new(bytes);
    expect_magic(cur.u32_be()?, LABELS_MAGIC, "label")?;
    let count = cur.u32_be()? as usize;
    let labels = cur.take(count)?.to_vec();
    expect_end(&cur, "label")?;
    Ok(labels)
}

/// Loads an image/label IDX pair with pixels scaled to [0, 1] by /255. The
/// result is tagged as the training split; see [`load_mnist_split`].
pub fn load_mnist_idx(images_path: &Path, labels_path: &Path) -> Result<LabeledDataset> {
    let images = parse_idx_images(&fs::read(images_path)?)?;
    let labels = parse_idx_labels(&fs::read(labels_path)?)?;
    if images.count != labels.len() {
        return Err(Error::Consistency(format!(
            "{} images but {} labels",
            images.count,
            labels.len()
        )));
    }
    let values = images.pixels.iter().map(|&b| b as f32 / 255.0).collect();
    let batch = Tensor4::from_vec([images.count, 1, images.rows, images.cols], values)?;
    LabeledDataset::new(
        batch,
        labels.into_iter().map(ClassId::from).collect(),
        Split::Train,
    )
}

/// Loads `train-*` or `t10k-*` files from an MNIST directory.
pub fn load_mnist_split(dir: &Path, split: Split) -> Result<LabeledDataset> {
    let prefix = match split {
        Split::Train => "train",
        Split::Test => "t10k",
    };
    let mut ds = load_mnist_idx(
        &dir.join(format!("{prefix}-images-idx3-ubyte")),
        &dir.join(format!("{prefix}-labels-idx1-ubyte")),
    )?;
    ds.split = split;
    Ok(ds)
}

/// Writes a single-channel dataset as an IDX pair. Pixels are quantized to
/// the nearest multiple of 1/255, so datasets already on that grid
/// round-trip exactly.
pub fn write_idx(dataset: &LabeledDataset, images_path: &Path, labels_path: &Path) -> Result<()> {
    let [n, c, h, w] = dataset.images.shape();
    if c != 1 {
        return Err(Error::Shape(format!("IDX images must have one channel, got {c}")));
    }
    let mut img = Vec::with_capacity(16 + n * h * w);
    for v in [IMAGES_MAGIC, n as u32, h as u32, w as u32] {
        img.extend_from_slice(&v.to_be_bytes());
    }
    img.extend(
        dataset
            .images
            .data()
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8),
    );
    let mut lab = Vec::with_capacity(8 + n);
    for v in [LABELS_MAGIC, n as u32] {
        lab.extend_from_slice(&v.to_be_bytes());
    }
    for &l in &dataset.labels {
        let byte = u8::try_from(l).map_err(|_| Error::InvalidInput(format!("label {l} does not fit a byte")))?;
        lab.push(byte);
    }
    fs::File::create(images_path)?.write_all(&img)?;
    fs::File::create(labels_path)?.write_all(&lab)?;
    Ok(())
}

/// Zero-pads 28x28 images by two pixels on every side.
pub fn pad_to_32(batch: &ImageBatch) -> Result<ImageBatch> {
    let [n, c, h, w] = batch.shape();
    if h != 28 || w != 28 {
        return Err(Error::Shape(format!("pad_to_32 expects 28x28 images, got {h}x{w}")));
    }
    let mut out = Tensor4::zeros([n, c, 32, 32]);
    for i in 0..n {
        let src = batch.item(i);
        let dst = out.item_mut(i);
        for ch in 0..c {
            for r in 0..28 {
                let s = (ch * 28 + r) * 28;
                let d = (ch * 32 + r + 2) * 32 + 2;
                dst[d..d + 28].copy_from_slice(&src[s..s + 28]);
            }
        }
    }
    Ok(out)
}
