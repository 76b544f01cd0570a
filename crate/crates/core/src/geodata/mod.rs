//! Observations, covariate rasters, satellite tiles and text embeddings;
//! the observation-driven pairing pipeline; augmentations; and a synthetic
//! world generator with known habitat ground truth.

mod augment;
mod io;
mod pairing;
mod raster;
mod synthetic;

pub use augment::{
    apply_geometric, apply_photometric, augment_geometric, augment_photometric, resize_bilinear,
    GeometricParams, PhotometricParams,
};
pub use io::{ingest_dataset, read_truth, write_dataset, write_world};
pub use pairing::{pair_samples, PairingOutcome, SkipCounts, DEFAULT_MATCH_RADIUS};
pub use raster::{CovariateRaster, COVARIATE_CHANNELS};
pub use synthetic::{generate_synthetic_world, SyntheticWorld, SyntheticWorldConfig, WorldTruth};

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GeoError {
    #[error("query ({lat}, {lon}) is outside the raster")]
    OutOfBounds { lat: f64, lon: f64 },
    #[error("invalid raster: {0}")]
    InvalidRaster(String),
    #[error("no observations to pair")]
    EmptyObservations,
    #[error("every observation was skipped ({0})")]
    AllSkipped(SkipCounts),
    #[error("crop size {crop} exceeds tile {height}x{width}")]
    CropTooLarge {
        crop: usize,
        height: usize,
        width: usize,
    },
    #[error("invalid tile: {0}")]
    InvalidTile(String),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("{file}: {detail}, row {record}")]
    Record {
        file: String,
        record: usize,
        detail: String,
    },
    #[error("{file}: {detail}")]
    Format { file: String, detail: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// A species sighting.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeoObservation {
    pub lat: f64,
    pub lon: f64,
    pub species_id: u32,
}

impl GeoObservation {
    pub fn validate(&self) -> Result<(), String> {
        if !(-90.0..=90.0).contains(&self.lat) {
            return Err("lat out of range".into());
        }
        if !(-180.0..180.0).contains(&self.lon) {
            return Err("lon out of range".into());
        }
        Ok(())
    }
}

/// One satellite acquisition, pixels stored `C x H x W` in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TileRecord {
    pub tile_id: u64,
    pub lat: f64,
    pub lon: f64,
    pub timestamp: i64,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<f64>,
}

impl TileRecord {
    pub fn validate(&self) -> Result<(), String> {
        if self.channels == 0 || self.height == 0 || self.width == 0 {
            return Err("empty tile dimensions".into());
        }
        if self.pixels.len() != self.channels * self.height * self.width {
            return Err(format!(
                "pixel count {} does not match {}x{}x{}",
                self.pixels.len(),
                self.channels,
                self.height,
                self.width
            ));
        }
        if let Some(p) = self.pixels.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(format!("pixel value {p} outside [0, 1]"));
        }
        Ok(())
    }

    /// Pixel at channel `c`, row `y`, column `x`.
    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.pixels[(c * self.height + y) * self.width + x]
    }

    pub fn with_pixels(&self, height: usize, width: usize, pixels: Vec<f64>) -> Self {
        Self {
            height,
            width,
            pixels,
            ..self.clone()
        }
    }
}

/// Embedding of one section of a species description.
#[derive(Debug, Clone, PartialEq)]
pub struct TextSection {
    pub species_id: u32,
    pub section_id: u32,
    pub embedding: Vec<f64>,
}

/// Everything needed to build training samples.
#[derive(Debug, Clone, PartialEq)]
pub struct GeoDataset {
    pub observations: Vec<GeoObservation>,
    pub raster: CovariateRaster,
    pub tiles: Vec<TileRecord>,
    pub texts: Vec<TextSection>,
}

impl GeoDataset {
    /// Species count: one past the largest id seen in observations or text.
    pub fn species_count(&self) -> usize {
        self.observations
            .iter()
            .map(|o| o.species_id)
            .chain(self.texts.iter().map(|t| t.species_id))
            .max()
            .map_or(0, |m| m as usize + 1)
    }

    pub fn text_dim(&self) -> Option<usize> {
        self.texts.first().map(|t| t.embedding.len())
    }

    pub fn tile_index(&self, tile_id: u64) -> Option<usize> {
        self.tiles.iter().position(|t| t.tile_id == tile_id)
    }
}

/// One aligned record. Tiles, the observation and the text section are
/// referenced by index into the owning [`GeoDataset`].
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSample {
    pub tile_a: usize,
    pub tile_b: usize,
    pub observation: usize,
    pub location: GeoObservation,
    /// Covariates at the observation, min-max scaled to `[-1, 1]`.
    pub covariates: Vec<f64>,
    pub text: usize,
}
