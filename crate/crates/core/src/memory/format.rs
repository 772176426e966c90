//! Store file layout, all integers little-endian:
//!
//! ```text
//! "EECM" | version u32 = 1 | file_len u64 | latent_dim u32 | class_count u32
//! per class (ascending label):
//!     label u32 | task u32 | episode_count u32 | pair_count u32
//!     episodes: latent_dim x f32 each
//!     pairs: centroid latent_dim x f32 | variance latent_dim x f32 | weight u32 | task u32
//! blob_count u32
//! per blob (ascending task): task u32 | byte_len u64 | bytes
//! crc32 u32 over every preceding byte except file_len
//! ```
//!
//! A file shorter than its declared length without a valid trailer is
//! reported as truncated (`UnexpectedEof`); every other inconsistency is a
//! format error.

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::Path;

use super::{ClassBucket, ConceptPair, EncodedEpisode, MemoryStore};
use crate::bytes::ByteReader;
use crate::error::{Error, Result};

pub const STORE_MAGIC: &[u8; 4] = b"EECM";
pub const STORE_VERSION: u32 = 1;

const MAX_LATENT_DIM: usize = 1 << 16;
const PREAMBLE: usize = 16;
const TRAILER: usize = 4;

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_f32s(out: &mut Vec<u8>, vs: &[f32]) {
    for v in vs {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn count(n: usize, what: &str) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::Format(format!("{what} {n} does not fit the file format")))
}

fn format_err(msg: impl Into<String>) -> Error {
    Error::Format(msg.into())
}

/// Inside a length-verified file, running out of bytes means a count field
/// lies.
fn as_format(e: Error) -> Error {
    match e {
        Error::Io(io) if io.kind() == io::ErrorKind::UnexpectedEof => {
            Error::Format(format!("counts disagree with payload: {io}"))
        }
        other => other,
    }
}

/// The checksum skips the length field so that a file whose only damage is
/// its declared length is still recognised as complete.
fn checksum(body: &[u8]) -> u32 {
    let mut h = crc32fast::Hasher::new();
    h.update(&body[..8]);
    h.update(&body[PREAMBLE..]);
    h.finalize()
}

fn trailer_valid(bytes: &[u8]) -> bool {
    if bytes.len() < PREAMBLE + TRAILER {
        return false;
    }
    let (body, tail) = bytes.split_at(bytes.len() - TRAILER);
    checksum(body).to_le_bytes() == tail
}

impl MemoryStore<f32> {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(STORE_MAGIC);
        put_u32(&mut out, STORE_VERSION);
        out.extend_from_slice(&0u64.to_le_bytes());
        put_u32(&mut out, count(self.latent_dim, "latent dimension")?);
        put_u32(&mut out, count(self.classes.len(), "class count")?);
        for (&label, bucket) in &self.classes {
            put_u32(&mut out, label);
            put_u32(&mut out, bucket.task);
            put_u32(&mut out, count(bucket.episodes.len(), "episode count")?);
            put_u32(&mut out, count(bucket.pairs.len(), "pair count")?);
            for e in &bucket.episodes {
                put_f32s(&mut out, &e.embedding);
            }
            for p in &bucket.pairs {
                put_f32s(&mut out, &p.centroid);
                put_f32s(&mut out, &p.variance);
                put_u32(&mut out, p.weight);
                put_u32(&mut out, p.task);
            }
        }
        put_u32(&mut out, count(self.checkpoints.len(), "checkpoint count")?);
        for (&task, blob) in &self.checkpoints {
            put_u32(&mut out, task);
            out.extend_from_slice(&(blob.len() as u64).to_le_bytes());
            out.extend_from_slice(blob);
        }
        let total = (out.len() + TRAILER) as u64;
        out[8..16].copy_from_slice(&total.to_le_bytes());
        let crc = checksum(&out);
        put_u32(&mut out, crc);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = ByteReader::new(bytes);
        if cur.take(4)? != STORE_MAGIC {
            return Err(format_err("not a memory store (bad magic)"));
        }
        let version = cur.u32()?;
        if version != STORE_VERSION {
            return Err(format_err(format!("unsupported store version {version}")));
        }
        let declared = cur.u64()?;
        if declared != bytes.len() as u64 {
            if (bytes.len() as u64) < declared && !trailer_valid(bytes) {
                return Err(Error::Io(io::Error::new(
                    io::ErrorKind::UnexpectedEof,
                    format!("store truncated: {} of {declared} bytes", bytes.len()),
                )));
            }
            return Err(format_err(format!(
                "declared length {declared} but file has {} bytes",
                bytes.len()
            )));
        }
        if !trailer_valid(bytes) {
            return Err(format_err("checksum mismatch"));
        }
        parse_body(&bytes[PREAMBLE..bytes.len() - TRAILER]).map_err(as_format)
    }
}

fn parse_body(body: &[u8]) -> Result<MemoryStore<f32>> {
    let mut cur = ByteReader::new(body);
    let dim = cur.u32()? as usize;
    if !(1..=MAX_LATENT_DIM).contains(&dim) {
        return Err(format_err(format!("implausible latent dimension {dim}")));
    }
    let class_count = cur.u32()? as usize;
    let mut classes = BTreeMap::new();
    for _ in 0..class_count {
        let label = cur.u32()?;
        let task = cur.u32()?;
        let n_episodes = cur.u32()? as usize;
        let n_pairs = cur.u32()? as usize;
        if n_episodes + n_pairs == 0 {
            return Err(format_err(format!("class {label} is empty")));
        }
        if classes.keys().next_back().is_some_and(|&prev| prev >= label) {
            return Err(format_err(format!("class {label} out of order")));
        }
        let finite = |v: &[f32], what: &str| {
            if v.iter().all(|x| x.is_finite()) {
                Ok(())
            } else {
                Err(format_err(format!("non-finite {what} in class {label}")))
            }
        };
        let mut episodes = Vec::new();
        for _ in 0..n_episodes {
            let embedding = cur.f32s(dim)?;
            finite(&embedding, "embedding")?;
            episodes.push(EncodedEpisode {
                embedding,
                label,
                task,
            });
        }
        let mut pairs = Vec::new();
        for _ in 0..n_pairs {
            let centroid = cur.f32s(dim)?;
            let variance = cur.f32s(dim)?;
            let weight = cur.u32()?;
            let pair_task = cur.u32()?;
            finite(&centroid, "centroid")?;
            finite(&variance, "variance")?;
            if variance.iter().any(|v| *v < 0.0) {
                return Err(format_err(format!("negative variance in class {label}")));
            }
            if weight < 2 {
                return Err(format_err(format!("pair weight {weight} below 2 in class {label}")));
            }
            pairs.push(ConceptPair {
                centroid,
                variance,
                weight,
                label,
                task: pair_task,
            });
        }
        classes.insert(
            label,
            ClassBucket {
                task,
                episodes,
                pairs,
            },
        );
    }
    let blob_count = cur.u32()? as usize;
    let mut checkpoints = BTreeMap::new();
    for _ in 0..blob_count {
        let task = cur.u32()?;
        let len = usize::try_from(cur.u64()?).map_err(|_| format_err("checkpoint too large"))?;
        if checkpoints.keys().next_back().is_some_and(|&prev| prev >= task) {
            return Err(format_err(format!("checkpoint {task} out of order")));
        }
        checkpoints.insert(task, cur.take(len)?.to_vec());
    }
    if !cur.is_empty() {
        return Err(format_err(format!("{} unexpected trailing bytes", cur.remaining())));
    }
    Ok(MemoryStore {
        latent_dim: dim,
        classes,
        checkpoints,
    })
}

pub fn save_store(store: &MemoryStore<f32>, path: &Path) -> Result<()> {
    fs::write(path, store.to_bytes()?)?;
    Ok(())
}

pub fn load_store(path: &Path) -> Result<MemoryStore<f32>> {
    MemoryStore::from_bytes(&fs::read(path)?)
}
