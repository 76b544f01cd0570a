//! Plain-text and binary inputs: vectors, label lists, label sets.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn fields(line: &str) -> impl Iterator<Item = &str> {
    line.split(|c: char| c == ',' || c.is_whitespace())
        .filter(|f| !f.is_empty())
}

/// A vector from `.bin` (little-endian f32) or text (comma or whitespace
/// separated).
pub fn read_vector(path: &Path) -> Result<Vec<f64>> {
    if path.extension().is_some_and(|e| e == "bin") {
        let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
        if bytes.len() % 4 != 0 || bytes.is_empty() {
            bail!(
                "{}: {} bytes is not a whole number of f32 values",
                path.display(),
                bytes.len()
            );
        }
        return Ok(bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
            .collect());
    }
    let v = read_rows(path)?.concat();
    if v.is_empty() {
        bail!("{}: empty vector", path.display());
    }
    Ok(v)
}

/// One float row per non-empty line.
pub fn read_rows(path: &Path) -> Result<Vec<Vec<f64>>> {
    let text = read_text(path)?;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row = fields(line)
            .map(|f| f.parse::<f64>())
            .collect::<Result<Vec<_>, _>>()
            .with_context(|| format!("{}: line {}: bad number", path.display(), i + 1))?;
        if row.iter().any(|x| !x.is_finite()) {
            bail!("{}: line {}: non-finite value", path.display(), i + 1);
        }
        rows.push(row);
    }
    Ok(rows)
}

/// One non-negative integer per non-empty line.
pub fn read_labels(path: &Path) -> Result<Vec<usize>> {
    let text = read_text(path)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            l.trim().parse().with_context(|| {
                format!("{}: line {}: expected a class index", path.display(), i + 1)
            })
        })
        .collect()
}

/// One label set per line; an empty line is an empty set.
pub fn read_sets(path: &Path) -> Result<Vec<BTreeSet<usize>>> {
    let text = read_text(path)?;
    text.lines()
        .enumerate()
        .map(|(i, l)| {
            fields(l)
                .map(|f| f.parse())
                .collect::<Result<BTreeSet<usize>, _>>()
                .with_context(|| {
                    format!("{}: line {}: expected class indices", path.display(), i + 1)
                })
        })
        .collect()
}

/// `tile_id,label` rows with a header line.
pub fn read_tile_labels(path: &Path) -> Result<Vec<(u64, usize)>> {
    let mut reader =
        csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
    let headers = reader.headers()?.clone();
    if headers.iter().collect::<Vec<_>>() != ["tile_id", "label"] {
        bail!(
            "{}: malformed header, expected tile_id,label",
            path.display()
        );
    }
    let mut out = Vec::new();
    for (i, rec) in reader.deserialize::<(u64, usize)>().enumerate() {
        out.push(rec.with_context(|| format!("{}: row {i}", path.display()))?);
    }
    Ok(out)
}
