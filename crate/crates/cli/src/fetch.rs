//! Dataset download with SHA-256 verification. Files are checked in their
//! decompressed form; nothing unverified is ever left in the target
//! directory.

use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use eec_core::data::{load_mnist_split, Split};
use flate2::read::GzDecoder;
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};

pub const MNIST_MANIFEST: &str = include_str!("../manifests/mnist.sha256");
pub const MNIST_SOURCE: &str = "https://ossci-datasets.s3.amazonaws.com/mnist";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub sha256: String,
    pub name: String,
}

/// Parses `sha256sum`-style lines: 64 hex digits, whitespace, file name.
pub fn parse_manifest(text: &str) -> CliResult<Vec<ManifestEntry>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = || CliError::Config(format!("manifest line {}: expected `<sha256>  <file>`", n + 1));
        let (hash, name) = line.split_once(char::is_whitespace).ok_or_else(bad)?;
        let name = name.trim().trim_start_matches('*');
        if hash.len() != 64 || !hash.bytes().all(|b| b.is_ascii_hexdigit()) || name.is_empty() {
            return Err(bad());
        }
        if name.contains('/') || name.contains('\\') || name == ".." {
            return Err(CliError::Config(format!("manifest line {}: file name must be bare", n + 1)));
        }
        out.push(ManifestEntry {
            sha256: hash.to_ascii_lowercase(),
            name: name.to_string(),
        });
    }
    if out.is_empty() {
        return Err(CliError::Config("manifest lists no files".into()));
    }
    Ok(out)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Source {
    Dir(PathBuf),
    Url(String),
}

impl Source {
    pub fn parse(s: &str) -> Self {
        if s.starts_with("http://") || s.starts_with("https://") {
            Source::Url(s.trim_end_matches('/').to_string())
        } else {
            Source::Dir(PathBuf::from(s.strip_prefix("file://").unwrap_or(s)))
        }
    }
}

pub struct FetchArgs {
    pub dataset: String,
    pub dir: PathBuf,
    pub source: Option<String>,
    pub manifest: Option<PathBuf>,
}

#[derive(Debug, Default, PartialEq, Eq)]
pub struct FetchReport {
    pub present: Vec<String>,
    pub fetched: Vec<String>,
}

fn gunzip(bytes: &[u8], what: &str) -> CliResult<Vec<u8>> {
    let mut out = Vec::new();
    GzDecoder::new(bytes)
        .read_to_end(&mut out)
        .map_err(|e| CliError::Integrity(format!("{what}: not a valid gzip stream: {e}")))?;
    Ok(out)
}

fn obtain(source: &Source, name: &str) -> CliResult<Vec<u8>> {
    match source {
        Source::Dir(dir) => {
            let plain = dir.join(name);
            if plain.is_file() {
                return fs::read(&plain).map_err(|e| CliError::io(&plain, e));
            }
            let gz = dir.join(format!("{name}.gz"));
            let bytes = fs::read(&gz).map_err(|e| CliError::io(&gz, e))?;
            gunzip(&bytes, &gz.display().to_string())
        }
        Source::Url(base) => {
            let url = format!("{base}/{name}.gz");
            let resp = ureq::get(&url)
                .call()
                .map_err(|e| CliError::Runtime(format!("download {url}: {e}")))?;
            let mut bytes = Vec::new();
            resp.into_reader()
                .read_to_end(&mut bytes)
                .map_err(|e| CliError::Runtime(format!("download {url}: {e}")))?;
            gunzip(&bytes, &url)
        }
    }
}

fn verified(path: &Path, sha256: &str) -> CliResult<bool> {
    if !path.is_file() {
        return Ok(false);
    }
    let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
    Ok(sha256_hex(&bytes) == sha256)
}

pub fn cmd_fetch(args: &FetchArgs) -> CliResult<FetchReport> {
    if args.dataset != "mnist" {
        return Err(CliError::Config(format!("unknown dataset `{}` (only `mnist` can be fetched)", args.dataset)));
    }
    let manifest = match &args.manifest {
        Some(p) => parse_manifest(&fs::read_to_string(p).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?)?,
        None => parse_manifest(MNIST_MANIFEST)?,
    };
    let source = Source::parse(args.source.as_deref().unwrap_or(MNIST_SOURCE));
    fs::create_dir_all(&args.dir).map_err(|e| CliError::io(&args.dir, e))?;

    let mut report = FetchReport::default();
    for entry in &manifest {
        let target = args.dir.join(&entry.name);
        if verified(&target, &entry.sha256)? {
            report.present.push(entry.name.clone());
            continue;
        }
        eprintln!("fetching {}", entry.name);
        let bytes = obtain(&source, &entry.name)?;
        let got = sha256_hex(&bytes);
        if got != entry.sha256 {
            // a stale or damaged copy must not survive a failed fetch
            if target.exists() {
                fs::remove_file(&target).map_err(|e| CliError::io(&target, e))?;
            }
            return Err(CliError::Integrity(format!(
                "checksum mismatch for {}: expected {}, got {got}",
                entry.name, entry.sha256
            )));
        }
        let part = args.dir.join(format!("{}.part", entry.name));
        fs::write(&part, &bytes).map_err(|e| CliError::io(&part, e))?;
        fs::rename(&part, &target).map_err(|e| CliError::io(&target, e))?;
        report.fetched.push(entry.name.clone());
    }

    let listed = |n: &str| manifest.iter().any(|e| e.name == n);
    if ["train", "t10k"]
        .iter()
        .all(|p| listed(&format!("{p}-images-idx3-ubyte")) && listed(&format!("{p}-labels-idx1-ubyte")))
    {
        load_mnist_split(&args.dir, Split::Train)?;
        load_mnist_split(&args.dir, Split::Test)?;
    }
    Ok(report)
}
