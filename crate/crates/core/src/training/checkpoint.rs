//! `ckpt.json` header plus `ckpt.bin`, the header's tensors concatenated as
//! little-endian f64 in header order.
//!
//! Tensor names: model parameters by their own name, normalization running
//! averages as `running/<layer>/mean|var`, Adam moments as
//! `adam/m/<param>` and `adam/v/<param>`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{RngState, TrainConfig, TrainError};
use crate::encoders::{trainable_mask, NormRunning, WildSatModel};
use crate::numerics::{AdamConfig, AdamState, Tensor};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub version: u32,
    pub config: TrainConfig,
    pub model: WildSatModel,
    pub adam: AdamState,
    /// Next `(epoch, step)` to run.
    pub rng_state: RngState,
    /// Mean loss of each completed epoch.
    pub epoch_losses: Vec<f64>,
    /// Loss of every step taken so far.
    pub step_losses: Vec<f64>,
}

impl Checkpoint {
    /// Completed epochs.
    pub fn epoch(&self) -> usize {
        self.rng_state.epoch
    }

    fn tensors(&self) -> Vec<(String, Tensor)> {
        let mut out: Vec<(String, Tensor)> = self
            .model
            .params
            .iter()
            .map(|(name, e)| (name.to_string(), e.tensor.clone()))
            .collect();
        for (layer, r) in &self.model.running {
            let n = r.mean.len();
            out.push((
                format!("running/{layer}/mean"),
                Tensor::new(vec![n], r.mean.clone()).unwrap(),
            ));
            out.push((
                format!("running/{layer}/var"),
                Tensor::new(vec![n], r.var.clone()).unwrap(),
            ));
        }
        for (name, m) in &self.adam.first {
            out.push((format!("adam/m/{name}"), m.clone()));
        }
        for (name, v) in &self.adam.second {
            out.push((format!("adam/v/{name}"), v.clone()));
        }
        out
    }

    fn blob(&self) -> (Header, Vec<u8>) {
        let tensors = self.tensors();
        let mut blob = Vec::new();
        for (_, t) in &tensors {
            for v in t.data() {
                blob.extend_from_slice(&v.to_le_bytes());
            }
        }
        let header = Header {
            version: self.version,
            config: self.config.clone(),
            names: tensors.iter().map(|(n, _)| n.clone()).collect(),
            shapes: tensors.iter().map(|(_, t)| t.shape().to_vec()).collect(),
            dtype: DTYPE.into(),
            rng_state: self.rng_state,
            epoch: self.epoch(),
            adam: AdamHeader {
                config: self.adam.config,
                t: self.adam.t,
            },
            epoch_losses: self.epoch_losses.clone(),
            step_losses: self.step_losses.clone(),
        };
        (header, blob)
    }

    /// SHA-256 over the serialized header and blob.
    pub fn content_hash(&self) -> String {
        let (header, blob) = self.blob();
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&header).expect("serializable"));
        h.update(&blob);
        hex::encode(h.finalize())
    }
}

const DTYPE: &str = "f64le";

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AdamHeader {
    config: AdamConfig,
    t: u64,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    version: u32,
    config: TrainConfig,
    names: Vec<String>,
    shapes: Vec<Vec<usize>>,
    dtype: String,
    rng_state: RngState,
    epoch: usize,
    adam: AdamHeader,
    epoch_losses: Vec<f64>,
    step_losses: Vec<f64>,
}

/// Blob file paired with a header path: `ckpt.json` -> `ckpt.bin`.
pub fn blob_path(header: &Path) -> PathBuf {
    header.with_extension("bin")
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TrainError + '_ {
    move |source| TrainError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Writes `path` (header) and its sibling `.bin` blob.
pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<(), TrainError> {
    let (header, blob) = ckpt.blob();
    let text = serde_json::to_string_pretty(&header).expect("serializable");
    fs::write(path, text).map_err(io_err(path))?;
    let bin = blob_path(path);
    fs::write(&bin, blob).map_err(io_err(&bin))
}

fn field_err(field: impl Into<String>, detail: impl Into<String>) -> TrainError {
    TrainError::Checkpoint {
        field: field.into(),
        detail: detail.into(),
    }
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, TrainError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let raw: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| field_err("header", e.to_string()))?;
    let version = raw
        .get("version")
        .and_then(serde_json::Value::as_u64)
        .ok_or_else(|| field_err("version", "missing"))?;
    if version != CHECKPOINT_VERSION as u64 {
        return Err(TrainError::Version {
            found: version as u32,
            expected: CHECKPOINT_VERSION,
        });
    }
    let header: Header =
        serde_json::from_value(raw).map_err(|e| field_err("header", e.to_string()))?;
    if header.dtype != DTYPE {
        return Err(field_err(
            "dtype",
            format!("'{}' is not {DTYPE}", header.dtype),
        ));
    }
    if header.names.len() != header.shapes.len() {
        return Err(field_err("shapes", "length differs from names"));
    }
    header.config.validate()?;

    let bin = blob_path(path);
    let blob = fs::read(&bin).map_err(io_err(&bin))?;
    let expected: usize = header
        .shapes
        .iter()
        .map(|s| s.iter().product::<usize>() * 8)
        .sum();
    if blob.len() != expected {
        return Err(TrainError::BlobLength {
            expected,
            got: blob.len(),
        });
    }

    let mut model = WildSatModel::init(header.config.model.clone(), 0)?;
    let mut adam = AdamState::new(header.adam.config);
    adam.t = header.adam.t;
    let mut seen = std::collections::BTreeSet::new();
    let mut offset = 0;
    for (name, shape) in header.names.iter().zip(&header.shapes) {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = blob[offset..offset + n * 8]
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect();
        offset += n * 8;
        let tensor =
            Tensor::new(shape.clone(), data).map_err(|e| field_err(name, e.to_string()))?;
        if !seen.insert(name.clone()) {
            return Err(field_err(name, "appears twice"));
        }
        load_tensor(&mut model, &mut adam, name, tensor)?;
    }
    for name in model.params.names() {
        if !seen.contains(name) {
            return Err(field_err(name, "missing from checkpoint"));
        }
    }
    for layer in model.running.keys() {
        for part in ["mean", "var"] {
            let key = format!("running/{layer}/{part}");
            if !seen.contains(&key) {
                return Err(field_err(key, "missing from checkpoint"));
            }
        }
    }
    let mask = trainable_mask(
        header.config.peft,
        header.config.freeze_location,
        &model.params,
    );
    model.params.apply_mask(&mask)?;

    let ckpt = Checkpoint {
        version: header.version,
        config: header.config,
        model,
        adam,
        rng_state: header.rng_state,
        epoch_losses: header.epoch_losses,
        step_losses: header.step_losses,
    };
    if ckpt.epoch() != header.epoch {
        return Err(field_err("epoch", "disagrees with rng_state"));
    }
    Ok(ckpt)
}

fn load_tensor(
    model: &mut WildSatModel,
    adam: &mut AdamState,
    name: &str,
    tensor: Tensor,
) -> Result<(), TrainError> {
    let shape_err = |expected: &[usize]| {
        field_err(
            name,
            format!(
                "shape {:?} does not match config shape {expected:?}",
                tensor.shape()
            ),
        )
    };
    if let Some(rest) = name.strip_prefix("running/") {
        let (layer, part) = rest
            .rsplit_once('/')
            .ok_or_else(|| field_err(name, "malformed running-stat name"))?;
        let r: &mut NormRunning = model
            .running
            .get_mut(layer)
            .ok_or_else(|| field_err(name, "unknown normalization layer"))?;
        let slot = match part {
            "mean" => &mut r.mean,
            "var" => &mut r.var,
            _ => return Err(field_err(name, "malformed running-stat name")),
        };
        if tensor.shape() != [slot.len()] {
            return Err(shape_err(&[slot.len()]));
        }
        *slot = tensor.into_data();
        return Ok(());
    }
    for (prefix, is_first) in [("adam/m/", true), ("adam/v/", false)] {
        if let Some(param) = name.strip_prefix(prefix) {
            let p = model
                .params
                .get(param)
                .ok_or_else(|| field_err(name, "moment for unknown parameter"))?;
            if p.shape() != tensor.shape() {
                return Err(shape_err(p.shape()));
            }
            let map = if is_first {
                &mut adam.first
            } else {
                &mut adam.second
            };
            map.insert(param.to_string(), tensor);
            return Ok(());
        }
    }
    let expected = model
        .params
        .get(name)
        .ok_or_else(|| field_err(name, "unknown parameter"))?
        .shape()
        .to_vec();
    if tensor.shape() != expected {
        return Err(shape_err(&expected));
    }
    model.params.set(name, tensor)?;
    Ok(())
}
