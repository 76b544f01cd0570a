use std::collections::{BTreeMap, HashMap};
use std::fmt;

use log::debug;
use rand::Rng;

use super::{GeoDataset, GeoError, TrainingSample};
use crate::seed::{rng_for, stream};

/// Tile-to-observation matching radius in degrees.
pub const DEFAULT_MATCH_RADIUS: f64 = 0.05;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SkipCounts {
    pub no_tile: usize,
    pub no_text: usize,
    pub outside_raster: usize,
}

impl SkipCounts {
    pub fn total(&self) -> usize {
        self.no_tile + self.no_text + self.outside_raster
    }
}

impl fmt::Display for SkipCounts {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "no_tile={}, no_text={}, outside_raster={}",
            self.no_tile, self.no_text, self.outside_raster
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairingOutcome {
    pub samples: Vec<TrainingSample>,
    pub skipped: SkipCounts,
}

/// Buckets tiles on a square grid with cell size equal to the match radius.
struct TileGrid {
    cell: f64,
    buckets: HashMap<(i64, i64), Vec<usize>>,
}

impl TileGrid {
    fn new(dataset: &GeoDataset, cell: f64) -> Self {
        let mut buckets: HashMap<(i64, i64), Vec<usize>> = HashMap::new();
        for (i, t) in dataset.tiles.iter().enumerate() {
            buckets
                .entry(Self::key(cell, t.lat, t.lon))
                .or_default()
                .push(i);
        }
        Self { cell, buckets }
    }

    fn key(cell: f64, lat: f64, lon: f64) -> (i64, i64) {
        ((lat / cell).floor() as i64, (lon / cell).floor() as i64)
    }

    /// Nearest tile center within `radius`; ties go to the lowest tile id.
    fn nearest(&self, dataset: &GeoDataset, lat: f64, lon: f64, radius: f64) -> Option<usize> {
        let (ky, kx) = Self::key(self.cell, lat, lon);
        let mut best: Option<(f64, u64, usize)> = None;
        for dy in -1..=1 {
            for dx in -1..=1 {
                let Some(bucket) = self.buckets.get(&(ky + dy, kx + dx)) else {
                    continue;
                };
                for &i in bucket {
                    let t = &dataset.tiles[i];
                    let d = (t.lat - lat).hypot(t.lon - lon);
                    if d > radius {
                        continue;
                    }
                    let better = match best {
                        None => true,
                        Some((bd, bid, _)) => d < bd || (d == bd && t.tile_id < bid),
                    };
                    if better {
                        best = Some((d, t.tile_id, i));
                    }
                }
            }
        }
        best.map(|(_, _, i)| i)
    }
}

/// Turns observations into aligned training samples.
///
/// For each observation: the nearest tile within `radius` becomes `tile_a`;
/// `tile_b` is drawn uniformly from tiles at exactly the same center with a
/// different timestamp (falling back to `tile_a`); one text section of the
/// observed species is drawn uniformly; covariates are sampled bilinearly
/// and scaled to `[-1, 1]`. Each observation draws from its own seeded
/// stream, so the output does not depend on processing order.
pub fn pair_samples(
    dataset: &GeoDataset,
    radius: f64,
    seed: u64,
) -> Result<PairingOutcome, GeoError> {
    if dataset.observations.is_empty() {
        return Err(GeoError::EmptyObservations);
    }
    if !(radius > 0.0) {
        return Err(GeoError::InvalidConfig(format!(
            "match radius {radius} must be positive"
        )));
    }
    let grid = TileGrid::new(dataset, radius);

    let mut sites: HashMap<(u64, u64), Vec<usize>> = HashMap::new();
    for (i, t) in dataset.tiles.iter().enumerate() {
        sites
            .entry((t.lat.to_bits(), t.lon.to_bits()))
            .or_default()
            .push(i);
    }
    for members in sites.values_mut() {
        members.sort_by_key(|&i| dataset.tiles[i].tile_id);
    }
    let mut sections: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (i, s) in dataset.texts.iter().enumerate() {
        sections.entry(s.species_id).or_default().push(i);
    }

    let mut samples = Vec::new();
    let mut skipped = SkipCounts::default();
    for (idx, obs) in dataset.observations.iter().enumerate() {
        let Some(tile_a) = grid.nearest(dataset, obs.lat, obs.lon, radius) else {
            skipped.no_tile += 1;
            continue;
        };
        let Some(species_texts) = sections.get(&obs.species_id) else {
            skipped.no_text += 1;
            continue;
        };
        let Ok(covariates) = dataset.raster.sample_normalized(obs.lat, obs.lon) else {
            skipped.outside_raster += 1;
            continue;
        };
        let mut rng = rng_for(seed, &[stream::PAIRING, idx as u64]);
        let a = &dataset.tiles[tile_a];
        let others: Vec<usize> = sites[&(a.lat.to_bits(), a.lon.to_bits())]
            .iter()
            .copied()
            .filter(|&i| dataset.tiles[i].timestamp != a.timestamp)
            .collect();
        let tile_b = if others.is_empty() {
            tile_a
        } else {
            others[rng.random_range(0..others.len())]
        };
        let text = species_texts[rng.random_range(0..species_texts.len())];
        samples.push(TrainingSample {
            tile_a,
            tile_b,
            observation: idx,
            location: *obs,
            covariates,
            text,
        });
    }
    if skipped.total() > 0 {
        debug!(
            "pairing skipped {} observations ({skipped})",
            skipped.total()
        );
    }
    if samples.is_empty() {
        return Err(GeoError::AllSkipped(skipped));
    }
    Ok(PairingOutcome { samples, skipped })
}
