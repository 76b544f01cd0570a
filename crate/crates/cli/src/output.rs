//! Atomic output placement and the run manifest written beside outputs.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

fn parent_of(path: &Path) -> PathBuf {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

/// Builds a directory in a sibling temp location, then moves it over
/// `dest`. A failed build leaves `dest` untouched.
pub fn write_dir_atomic(dest: &Path, build: impl FnOnce(&Path) -> Result<()>) -> Result<()> {
    let parent = parent_of(dest);
    fs::create_dir_all(&parent).with_context(|| format!("creating {}", parent.display()))?;
    let tmp = tempfile::Builder::new()
        .prefix(".wildsat-")
        .tempdir_in(&parent)
        .with_context(|| format!("creating temp dir in {}", parent.display()))?;
    build(tmp.path())?;
    if dest.exists() {
        fs::remove_dir_all(dest).with_context(|| format!("replacing {}", dest.display()))?;
    }
    let staged = tmp.keep();
    fs::rename(&staged, dest).with_context(|| format!("moving output to {}", dest.display()))?;
    Ok(())
}

/// Writes files named relative to a staging dir, then renames each into
/// `dest_dir`. `files` lists the names; the last one is moved last.
pub fn write_files_atomic(
    dest_dir: &Path,
    files: &[&str],
    build: impl FnOnce(&Path) -> Result<()>,
) -> Result<()> {
    fs::create_dir_all(dest_dir).with_context(|| format!("creating {}", dest_dir.display()))?;
    let tmp = tempfile::Builder::new()
        .prefix(".wildsat-")
        .tempdir_in(dest_dir)
        .with_context(|| format!("creating temp dir in {}", dest_dir.display()))?;
    build(tmp.path())?;
    for name in files {
        let to = dest_dir.join(name);
        fs::rename(tmp.path().join(name), &to)
            .with_context(|| format!("moving output to {}", to.display()))?;
    }
    Ok(())
}

pub fn write_bytes_atomic(dest: &Path, bytes: &[u8]) -> Result<()> {
    let parent = parent_of(dest);
    fs::create_dir_all(&parent).with_context(|| format!("creating {}", parent.display()))?;
    let mut tmp = tempfile::NamedTempFile::new_in(&parent)
        .with_context(|| format!("creating temp file in {}", parent.display()))?;
    tmp.write_all(bytes)?;
    tmp.persist(dest)
        .with_context(|| format!("writing {}", dest.display()))?;
    Ok(())
}

/// SHA-256 of a file, or of a directory's relative paths and contents in
/// sorted order.
pub fn content_hash(path: &Path) -> Result<String> {
    let mut hasher = Sha256::new();
    let mut files = Vec::new();
    collect_files(path, path, &mut files)?;
    files.sort();
    for rel in files {
        let full = if rel.as_os_str().is_empty() {
            path.to_path_buf()
        } else {
            path.join(&rel)
        };
        hasher.update(rel.to_string_lossy().as_bytes());
        hasher.update([0]);
        let bytes = fs::read(&full).with_context(|| format!("reading {}", full.display()))?;
        hasher.update((bytes.len() as u64).to_le_bytes());
        hasher.update(&bytes);
    }
    Ok(hex::encode(hasher.finalize()))
}

fn collect_files(root: &Path, at: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    let meta = fs::metadata(at).with_context(|| format!("reading {}", at.display()))?;
    if meta.is_file() {
        out.push(at.strip_prefix(root).unwrap_or(at).to_path_buf());
        return Ok(());
    }
    for entry in fs::read_dir(at).with_context(|| format!("listing {}", at.display()))? {
        collect_files(root, &entry?.path(), out)?;
    }
    Ok(())
}

#[derive(Debug, Serialize)]
pub struct HashedPath {
    pub path: String,
    pub sha256: String,
}

impl HashedPath {
    pub fn of(path: &Path) -> Result<Self> {
        Ok(Self {
            path: path.display().to_string(),
            sha256: content_hash(path)?,
        })
    }
}

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: String,
    pub argv: Vec<String>,
    pub seed: Option<u64>,
    pub config: serde_json::Value,
    pub inputs: Vec<HashedPath>,
    pub outputs: Vec<HashedPath>,
    pub started_unix: u64,
    pub wall_seconds: f64,
}

pub struct ManifestBuilder {
    command: String,
    started: SystemTime,
    pub seed: Option<u64>,
    pub config: serde_json::Value,
    inputs: Vec<PathBuf>,
}

impl ManifestBuilder {
    pub fn start(command: &str) -> Self {
        Self {
            command: command.into(),
            started: SystemTime::now(),
            seed: None,
            config: serde_json::Value::Null,
            inputs: Vec::new(),
        }
    }

    pub fn input(&mut self, path: &Path) {
        self.inputs.push(path.to_path_buf());
    }

    /// Hashes inputs and outputs and writes `<primary>.run.json`.
    pub fn finish(self, primary: &Path, outputs: &[PathBuf]) -> Result<PathBuf> {
        let manifest = RunManifest {
            tool: env!("CARGO_PKG_NAME"),
            version: env!("CARGO_PKG_VERSION"),
            command: self.command,
            argv: std::env::args().collect(),
            seed: self.seed,
            config: self.config,
            inputs: self
                .inputs
                .iter()
                .map(|p| HashedPath::of(p))
                .collect::<Result<_>>()?,
            outputs: outputs
                .iter()
                .map(|p| HashedPath::of(p))
                .collect::<Result<_>>()?,
            started_unix: self
                .started
                .duration_since(UNIX_EPOCH)
                .map_or(0, |d| d.as_secs()),
            wall_seconds: self.started.elapsed().map_or(0.0, |d| d.as_secs_f64()),
        };
        let path = manifest_path(primary);
        write_bytes_atomic(&path, serde_json::to_string_pretty(&manifest)?.as_bytes())?;
        Ok(path)
    }
}

/// `ckpt.json` -> `ckpt.run.json`, `world` -> `world.run.json`.
pub fn manifest_path(primary: &Path) -> PathBuf {
    primary.with_extension("run.json")
}
