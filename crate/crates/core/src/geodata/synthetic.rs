//! Generated testbed with known ground truth.
//!
//! The raster's cells are partitioned into habitat regions (a Voronoi split
//! around one seed cell per habitat). Each habitat owns a pixel prototype, a
//! covariate prototype and a text prototype. Every species lives in exactly
//! one habitat: its observations fall next to tile sites inside that
//! habitat's region and its text sections are noisy copies of the habitat's
//! text prototype. Tiles are the habitat prototype plus a per-site colour
//! shift and per-acquisition pixel noise.

use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{CovariateRaster, GeoDataset, GeoError, GeoObservation, TextSection, TileRecord};
use super::{COVARIATE_CHANNELS, DEFAULT_MATCH_RADIUS};
use crate::seed::{rng_for, stream};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticWorldConfig {
    pub seed: u64,
    pub species: usize,
    pub habitats: usize,
    /// Raster grid nodes; there are `(rows - 1) x (cols - 1)` cells.
    pub raster_rows: usize,
    pub raster_cols: usize,
    pub origin_lat: f64,
    pub origin_lon: f64,
    /// Cell edge in degrees.
    pub cell_degrees: f64,
    pub tiles_per_habitat: usize,
    /// Acquisitions sharing one tile center.
    pub timestamps_per_site: usize,
    pub observations: usize,
    pub sections_per_species: usize,
    pub text_dim: usize,
    pub tile_size: usize,
    pub tile_channels: usize,
    /// Amplitude of habitat mean-colour differences.
    pub color_contrast: f64,
    /// Amplitude of the habitat-specific texture.
    pub texture_contrast: f64,
    /// Largest per-pixel deviation of a tile from its prototype, as a
    /// fraction of the smallest RMS distance between two prototypes.
    pub tile_noise: f64,
    pub covariate_noise: f64,
    pub text_noise: f64,
}

impl Default for SyntheticWorldConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            species: 32,
            habitats: 8,
            raster_rows: 17,
            raster_cols: 17,
            origin_lat: -40.0,
            origin_lon: -80.0,
            cell_degrees: 0.5,
            tiles_per_habitat: 32,
            timestamps_per_site: 2,
            observations: 1024,
            sections_per_species: 3,
            text_dim: 64,
            tile_size: 32,
            tile_channels: 3,
            color_contrast: 0.0,
            texture_contrast: 0.04,
            tile_noise: 0.25,
            covariate_noise: 0.05,
            text_noise: 0.3,
        }
    }
}

/// Largest allowed `tile_noise`.
pub const MAX_TILE_NOISE: f64 = 0.25;

impl SyntheticWorldConfig {
    pub fn validate(&self) -> Result<(), GeoError> {
        let bad = |m: String| Err(GeoError::InvalidConfig(m));
        let counts = [
            ("species", self.species),
            ("habitats", self.habitats),
            ("tiles_per_habitat", self.tiles_per_habitat),
            ("timestamps_per_site", self.timestamps_per_site),
            ("observations", self.observations),
            ("sections_per_species", self.sections_per_species),
            ("text_dim", self.text_dim),
            ("tile_size", self.tile_size),
            ("tile_channels", self.tile_channels),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return bad(format!("{name} must be at least 1"));
        }
        if self.raster_rows < 2 || self.raster_cols < 2 {
            return bad("raster needs at least 2x2 nodes".into());
        }
        let cells = (self.raster_rows - 1) * (self.raster_cols - 1);
        if self.habitats > cells {
            return bad(format!(
                "{} habitats cannot fit in {cells} raster cells",
                self.habitats
            ));
        }
        if !(self.cell_degrees > 0.0) {
            return bad("cell_degrees must be positive".into());
        }
        let lat_top = self.origin_lat + (self.raster_rows - 1) as f64 * self.cell_degrees;
        let lon_right = self.origin_lon + (self.raster_cols - 1) as f64 * self.cell_degrees;
        if self.origin_lat < -90.0
            || lat_top > 90.0
            || self.origin_lon < -180.0
            || lon_right >= 180.0
        {
            return bad("raster extends beyond valid coordinates".into());
        }
        let scales = [
            ("color_contrast", self.color_contrast),
            ("texture_contrast", self.texture_contrast),
            ("tile_noise", self.tile_noise),
            ("covariate_noise", self.covariate_noise),
            ("text_noise", self.text_noise),
        ];
        if let Some((name, v)) = scales.iter().find(|(_, v)| !(*v >= 0.0 && v.is_finite())) {
            return bad(format!("{name} = {v} must be a finite non-negative number"));
        }
        if self.tile_noise > MAX_TILE_NOISE {
            return bad(format!(
                "tile_noise {} exceeds {MAX_TILE_NOISE} of prototype separation",
                self.tile_noise
            ));
        }
        if self.color_contrast == 0.0 && self.texture_contrast == 0.0 && self.habitats > 1 {
            return bad("habitat prototypes would be identical".into());
        }
        Ok(())
    }

    fn site_margin(&self) -> f64 {
        (0.2 * self.cell_degrees).min(0.1)
    }
}

/// Ground truth emitted alongside a synthetic dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldTruth {
    pub habitats: usize,
    /// Habitat of each tile, in dataset tile order.
    pub tile_habitat: Vec<usize>,
    /// Site index of each tile; acquisitions of one site share a center.
    pub tile_site: Vec<usize>,
    pub species_habitat: Vec<usize>,
    /// Habitat of each raster cell, row-major over `(rows - 1) x (cols - 1)`.
    pub cell_habitat: Vec<usize>,
    pub cell_rows: usize,
    pub cell_cols: usize,
    pub text_prototypes: Vec<Vec<f64>>,
    pub tile_prototypes: Vec<Vec<f64>>,
    pub covariate_prototypes: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticWorld {
    pub config: SyntheticWorldConfig,
    pub dataset: GeoDataset,
    pub truth: WorldTruth,
}

impl SyntheticWorld {
    /// Habitat of the raster cell containing `(lat, lon)`.
    pub fn habitat_at(&self, lat: f64, lon: f64) -> Option<usize> {
        let r = &self.dataset.raster;
        if !r.contains(lat, lon) {
            return None;
        }
        let row = (((lat - r.lat0) / r.dlat).floor() as usize).min(self.truth.cell_rows - 1);
        let col = (((lon - r.lon0) / r.dlon).floor() as usize).min(self.truth.cell_cols - 1);
        Some(self.truth.cell_habitat[row * self.truth.cell_cols + col])
    }
}

fn f32_round(v: f64) -> f64 {
    v as f32 as f64
}

fn rms(a: &[f64], b: &[f64]) -> f64 {
    (a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64).sqrt()
}

fn gaussian(rng: &mut impl Rng) -> f64 {
    // Box-Muller; u1 is kept away from zero
    let u1: f64 = rng.random_range(f64::EPSILON..1.0);
    let u2: f64 = rng.random();
    (-2.0 * u1.ln()).sqrt() * (2.0 * PI * u2).cos()
}

/// Texture whose dominant spatial frequency grows with the habitat index.
fn habitat_texture(
    rng: &mut impl Rng,
    habitat: usize,
    habitats: usize,
    cfg: &SyntheticWorldConfig,
) -> Vec<f64> {
    let (c, s) = (cfg.tile_channels, cfg.tile_size);
    let band = 1.0 + 6.0 * habitat as f64 / habitats.max(2).saturating_sub(1).max(1) as f64;
    let waves: Vec<(f64, f64, f64, Vec<f64>)> = (0..4)
        .map(|_| {
            let theta = rng.random_range(0.0..PI);
            let freq = band * rng.random_range(0.9..1.1);
            let phase = rng.random_range(0.0..2.0 * PI);
            let gains: Vec<f64> = (0..c).map(|_| rng.random_range(-1.0..1.0)).collect();
            (theta, freq, phase, gains)
        })
        .collect();
    let mut tex = vec![0.0; c * s * s];
    for ch in 0..c {
        for y in 0..s {
            for x in 0..s {
                let v: f64 = waves
                    .iter()
                    .map(|(theta, f, phase, gains)| {
                        let u = (x as f64 * theta.cos() + y as f64 * theta.sin()) / s as f64;
                        gains[ch] * (2.0 * PI * f * u + phase).sin()
                    })
                    .sum();
                tex[(ch * s + y) * s + x] = v;
            }
        }
    }
    let peak = tex.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
    tex.iter_mut().for_each(|v| *v /= peak);
    tex
}

pub fn generate_synthetic_world(cfg: &SyntheticWorldConfig) -> Result<SyntheticWorld, GeoError> {
    cfg.validate()?;
    let mut rng = rng_for(cfg.seed, &[stream::WORLD]);
    let (cell_rows, cell_cols) = (cfg.raster_rows - 1, cfg.raster_cols - 1);
    let n_cells = cell_rows * cell_cols;
    let h = cfg.habitats;

    // Voronoi partition around distinct seed cells
    let mut seeds: Vec<usize> = Vec::with_capacity(h);
    while seeds.len() < h {
        let c = rng.random_range(0..n_cells);
        if !seeds.contains(&c) {
            seeds.push(c);
        }
    }
    let cell_habitat: Vec<usize> = (0..n_cells)
        .map(|cell| {
            let (r, c) = ((cell / cell_cols) as f64, (cell % cell_cols) as f64);
            (0..h)
                .min_by(|&a, &b| {
                    let d = |s: usize| {
                        let (sr, sc) =
                            ((seeds[s] / cell_cols) as f64, (seeds[s] % cell_cols) as f64);
                        (sr - r).powi(2) + (sc - c).powi(2)
                    };
                    d(a).total_cmp(&d(b))
                })
                .unwrap()
        })
        .collect();

    // prototypes
    let plane = cfg.tile_size * cfg.tile_size;
    let tile_prototypes: Vec<Vec<f64>> = (0..h)
        .map(|hab| {
            let colour: Vec<f64> = (0..cfg.tile_channels)
                .map(|_| rng.random_range(-1.0..=1.0) * cfg.color_contrast)
                .collect();
            let tex = habitat_texture(&mut rng, hab, h, cfg);
            tex.iter()
                .enumerate()
                .map(|(i, t)| {
                    f32_round((0.5 + colour[i / plane] + cfg.texture_contrast * t).clamp(0.0, 1.0))
                })
                .collect()
        })
        .collect();
    let covariate_prototypes: Vec<Vec<f64>> = (0..h)
        .map(|_| {
            (0..COVARIATE_CHANNELS)
                .map(|_| rng.random_range(-1.0..1.0))
                .collect()
        })
        .collect();
    let text_prototypes: Vec<Vec<f64>> = (0..h)
        .map(|_| {
            let scale = 1.0 / (cfg.text_dim as f64).sqrt();
            (0..cfg.text_dim)
                .map(|_| f32_round(gaussian(&mut rng) * scale))
                .collect()
        })
        .collect();

    let min_sep = (0..h)
        .flat_map(|a| (a + 1..h).map(move |b| (a, b)))
        .map(|(a, b)| rms(&tile_prototypes[a], &tile_prototypes[b]))
        .fold(f64::INFINITY, f64::min);
    if h > 1 && !(min_sep > 0.0) {
        return Err(GeoError::InvalidConfig(
            "two habitat prototypes coincide".into(),
        ));
    }
    let amplitude = if h > 1 { cfg.tile_noise * min_sep } else { 0.0 };

    // raster: node takes the habitat of the cell it anchors
    let mut values = Vec::with_capacity(cfg.raster_rows * cfg.raster_cols * COVARIATE_CHANNELS);
    for r in 0..cfg.raster_rows {
        for c in 0..cfg.raster_cols {
            let hab = cell_habitat[r.min(cell_rows - 1) * cell_cols + c.min(cell_cols - 1)];
            for k in 0..COVARIATE_CHANNELS {
                let noise = cfg.covariate_noise * gaussian(&mut rng);
                values.push(f32_round(covariate_prototypes[hab][k] + noise));
            }
        }
    }
    let raster = CovariateRaster::from_values(
        cfg.raster_rows,
        cfg.raster_cols,
        COVARIATE_CHANNELS,
        (cfg.origin_lat, cfg.origin_lon),
        (cfg.cell_degrees, cfg.cell_degrees),
        values,
    )?;

    // tile sites inside each habitat, kept apart so nearest-tile matching
    // is unambiguous
    let margin = cfg.site_margin();
    let min_site_gap = 3.0 * DEFAULT_MATCH_RADIUS;
    let region_cells: Vec<Vec<usize>> = (0..h)
        .map(|hab| (0..n_cells).filter(|&c| cell_habitat[c] == hab).collect())
        .collect();
    let sites_per_habitat = cfg.tiles_per_habitat.div_ceil(cfg.timestamps_per_site);
    let mut site_centers: Vec<(f64, f64, usize)> = Vec::new();
    for (hab, cells) in region_cells.iter().enumerate() {
        for _ in 0..sites_per_habitat {
            let mut placed = false;
            for _attempt in 0..1000 {
                let cell = cells[rng.random_range(0..cells.len())];
                let (cr, cc) = (cell / cell_cols, cell % cell_cols);
                let lat = f32_round(
                    cfg.origin_lat
                        + (cr as f64 + 0.0) * cfg.cell_degrees
                        + rng.random_range(margin..cfg.cell_degrees - margin),
                );
                let lon = f32_round(
                    cfg.origin_lon
                        + cc as f64 * cfg.cell_degrees
                        + rng.random_range(margin..cfg.cell_degrees - margin),
                );
                if site_centers
                    .iter()
                    .all(|&(la, lo, _)| (la - lat).hypot(lo - lon) > min_site_gap)
                {
                    site_centers.push((lat, lon, hab));
                    placed = true;
                    break;
                }
            }
            if !placed {
                return Err(GeoError::InvalidConfig(format!(
                    "could not place {sites_per_habitat} separated sites in habitat {hab}"
                )));
            }
        }
    }

    let mut tiles = Vec::with_capacity(h * cfg.tiles_per_habitat);
    let mut tile_habitat = Vec::new();
    let mut tile_site = Vec::new();
    for hab in 0..h {
        let sites: Vec<usize> = (0..site_centers.len())
            .filter(|&s| site_centers[s].2 == hab)
            .collect();
        for k in 0..cfg.tiles_per_habitat {
            let site = sites[k / cfg.timestamps_per_site];
            let stamp = k % cfg.timestamps_per_site;
            let (lat, lon, _) = site_centers[site];
            let mut site_rng = rng_for(cfg.seed, &[stream::WORLD, 1, site as u64]);
            let shift: Vec<f64> = (0..cfg.tile_channels)
                .map(|_| site_rng.random_range(-0.5..=0.5) * amplitude)
                .collect();
            let proto = &tile_prototypes[hab];
            let pixels: Vec<f64> = proto
                .iter()
                .enumerate()
                .map(|(i, p)| {
                    let noise = rng.random_range(-0.5..=0.5) * amplitude;
                    f32_round((p + shift[i / plane] + noise).clamp(0.0, 1.0))
                })
                .collect();
            tiles.push(TileRecord {
                tile_id: tiles.len() as u64,
                lat,
                lon,
                timestamp: 1_600_000_000 + 432_000 * stamp as i64,
                channels: cfg.tile_channels,
                height: cfg.tile_size,
                width: cfg.tile_size,
                pixels,
            });
            tile_habitat.push(hab);
            tile_site.push(site);
        }
    }

    let species_habitat: Vec<usize> = (0..cfg.species).map(|s| s % h).collect();
    let mut observations = Vec::with_capacity(cfg.observations);
    for i in 0..cfg.observations {
        let species = i % cfg.species;
        let hab = species_habitat[species];
        let sites: Vec<usize> = (0..site_centers.len())
            .filter(|&s| site_centers[s].2 == hab)
            .collect();
        let (lat, lon, _) = site_centers[sites[rng.random_range(0..sites.len())]];
        let r = rng.random_range(0.0..0.5 * DEFAULT_MATCH_RADIUS);
        let a = rng.random_range(0.0..2.0 * PI);
        observations.push(GeoObservation {
            lat: lat + r * a.sin(),
            lon: lon + r * a.cos(),
            species_id: species as u32,
        });
    }

    let mut texts = Vec::with_capacity(cfg.species * cfg.sections_per_species);
    let scale = cfg.text_noise / (cfg.text_dim as f64).sqrt();
    for (species, &hab) in species_habitat.iter().enumerate() {
        let species_offset: Vec<f64> = (0..cfg.text_dim)
            .map(|_| gaussian(&mut rng) * scale)
            .collect();
        for section in 0..cfg.sections_per_species {
            let embedding = text_prototypes[hab]
                .iter()
                .zip(&species_offset)
                .map(|(p, o)| f32_round(p + o + gaussian(&mut rng) * scale))
                .collect();
            texts.push(TextSection {
                species_id: species as u32,
                section_id: section as u32,
                embedding,
            });
        }
    }

    Ok(SyntheticWorld {
        config: cfg.clone(),
        dataset: GeoDataset {
            observations,
            raster,
            tiles,
            texts,
        },
        truth: WorldTruth {
            habitats: h,
            tile_habitat,
            tile_site,
            species_habitat,
            cell_habitat,
            cell_rows,
            cell_cols,
            text_prototypes,
            tile_prototypes,
            covariate_prototypes,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SyntheticWorldConfig {
        SyntheticWorldConfig {
            species: 6,
            habitats: 3,
            raster_rows: 6,
            raster_cols: 6,
            tiles_per_habitat: 4,
            observations: 30,
            text_dim: 8,
            tile_size: 8,
            ..Default::default()
        }
    }

    #[test]
    fn deterministic() {
        assert_eq!(
            generate_synthetic_world(&small()).unwrap(),
            generate_synthetic_world(&small()).unwrap()
        );
    }

    #[test]
    fn tile_count() {
        let w = generate_synthetic_world(&small()).unwrap();
        assert_eq!(w.dataset.tiles.len(), 3 * 4);
        assert!(w.dataset.tiles.iter().all(|t| t.validate().is_ok()));
    }

    #[test]
    fn observations_inside_habitat() {
        let w = generate_synthetic_world(&small()).unwrap();
        for o in &w.dataset.observations {
            let expected = w.truth.species_habitat[o.species_id as usize];
            assert_eq!(w.habitat_at(o.lat, o.lon), Some(expected));
        }
    }

    #[test]
    fn too_many_habitats() {
        let cfg = SyntheticWorldConfig {
            habitats: 26,
            raster_rows: 6,
            raster_cols: 6,
            ..small()
        };
        assert!(matches!(
            generate_synthetic_world(&cfg),
            Err(GeoError::InvalidConfig(_))
        ));
    }

    #[test]
    fn noise_bound_enforced() {
        let cfg = SyntheticWorldConfig {
            tile_noise: 0.3,
            ..small()
        };
        assert!(cfg.validate().is_err());
    }
}
