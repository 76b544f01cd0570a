use proptest::prelude::*;
use rand::Rng;

use wildsat::geodata::{
    augment_geometric, generate_synthetic_world, ingest_dataset, pair_samples, write_world,
    CovariateRaster, SyntheticWorldConfig, TileRecord, DEFAULT_MATCH_RADIUS,
};
use wildsat::seed::rng_for;

fn unit_cell(corners: [f64; 4]) -> CovariateRaster {
    // nodes (0,0), (0,1), (1,0), (1,1)
    CovariateRaster::from_values(2, 2, 1, (0.0, 0.0), (1.0, 1.0), corners.to_vec()).unwrap()
}

fn random_raster(seed: u64, rows: usize, cols: usize, channels: usize) -> CovariateRaster {
    let mut rng = rng_for(seed, &[]);
    let values = (0..rows * cols * channels)
        .map(|_| rng.random_range(-50.0..50.0))
        .collect();
    CovariateRaster::from_values(rows, cols, channels, (-10.0, 20.0), (0.3, 0.7), values).unwrap()
}

#[test]
fn unit_cell_center_is_corner_mean() {
    let r = unit_cell([0.0, 1.0, 2.0, 3.0]);
    assert_eq!(r.bilinear_sample(0.5, 0.5).unwrap(), vec![1.5]);
}

#[test]
fn grid_nodes_are_exact() {
    let r = random_raster(4, 6, 5, 3);
    for row in 0..r.rows {
        for col in 0..r.cols {
            let lat = r.lat0 + row as f64 * r.dlat;
            let lon = r.lon0 + col as f64 * r.dlon;
            assert_eq!(r.bilinear_sample(lat, lon).unwrap(), r.node(row, col));
        }
    }
}

#[test]
fn samples_are_convex_combinations_of_corners() {
    let r = random_raster(9, 5, 7, 4);
    let mut rng = rng_for(10, &[]);
    for _ in 0..10_000 {
        let lat = rng.random_range(r.lat0..=r.lat_max());
        let lon = rng.random_range(r.lon0..=r.lon_max());
        let v = r.bilinear_sample(lat, lon).unwrap();
        let row = (((lat - r.lat0) / r.dlat).floor() as usize).min(r.rows - 2);
        let col = (((lon - r.lon0) / r.dlon).floor() as usize).min(r.cols - 2);
        for k in 0..r.channels {
            let corners = [
                r.node(row, col)[k],
                r.node(row, col + 1)[k],
                r.node(row + 1, col)[k],
                r.node(row + 1, col + 1)[k],
            ];
            let lo = corners.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = corners.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            assert!(v[k] >= lo - 1e-12 && v[k] <= hi + 1e-12);
        }
    }
}

#[test]
fn out_of_bounds_is_an_error() {
    let r = unit_cell([0.0; 4]);
    assert!(r.bilinear_sample(1.5, 0.5).is_err());
    assert!(r.bilinear_sample(0.5, -0.1).is_err());
}

proptest! {
    #[test]
    fn sampling_is_continuous(seed in 0u64..50, fy in 0.0f64..1.0, fx in 0.0f64..1.0) {
        let r = random_raster(seed, 4, 4, 2);
        let lat = r.lat0 + fy * (r.lat_max() - r.lat0 - 2e-9);
        let lon = r.lon0 + fx * (r.lon_max() - r.lon0 - 2e-9);
        let a = r.bilinear_sample(lat, lon).unwrap();
        let b = r.bilinear_sample(lat + 1e-9, lon + 1e-9).unwrap();
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn geometric_augmentation_keeps_unit_range(seed in 0u64..1000, crop in 4usize..=8) {
        let mut rng = rng_for(seed, &[1]);
        let tile = TileRecord {
            tile_id: 0,
            lat: 0.0,
            lon: 0.0,
            timestamp: 0,
            channels: 2,
            height: 8,
            width: 8,
            pixels: (0..128).map(|_| rng.random_range(0.0..=1.0)).collect(),
        };
        let out = augment_geometric(&tile, crop, 6, seed).unwrap();
        prop_assert_eq!(out.pixels.len(), 2 * 6 * 6);
        prop_assert!(out.pixels.iter().all(|p| (0.0..=1.0).contains(p)));
    }
}

#[test]
fn flips_preserve_the_pixel_multiset() {
    let mut rng = rng_for(3, &[]);
    let tile = TileRecord {
        tile_id: 0,
        lat: 0.0,
        lon: 0.0,
        timestamp: 0,
        channels: 3,
        height: 5,
        width: 5,
        pixels: (0..75).map(|_| rng.random_range(0.0..=1.0)).collect(),
    };
    let sorted = |v: &[f64]| {
        let mut v = v.to_vec();
        v.sort_by(f64::total_cmp);
        v
    };
    for seed in 0..50 {
        // full crop at the input size: only flips can change the tile
        let out = augment_geometric(&tile, 5, 5, seed).unwrap();
        assert_eq!(sorted(&out.pixels), sorted(&tile.pixels));
    }
}

fn rms(a: &[f64], b: &[f64]) -> f64 {
    (a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64).sqrt()
}

#[test]
fn synthetic_tiles_are_nearest_their_own_prototype() {
    for seed in 0..5 {
        let world = generate_synthetic_world(&SyntheticWorldConfig {
            seed,
            ..SyntheticWorldConfig::default()
        })
        .unwrap();
        let protos = &world.truth.tile_prototypes;
        for (i, tile) in world.dataset.tiles.iter().enumerate() {
            let own = world.truth.tile_habitat[i];
            let d_own = rms(&tile.pixels, &protos[own]);
            for (h, p) in protos.iter().enumerate() {
                if h != own {
                    assert!(d_own < rms(&tile.pixels, p), "seed {seed} tile {i}");
                }
            }
        }
    }
}

#[test]
fn synthetic_world_shape_and_ground_truth() {
    let cfg = SyntheticWorldConfig::default();
    let world = generate_synthetic_world(&cfg).unwrap();
    assert_eq!(world.dataset.tiles.len(), 256);
    assert_eq!(world.truth.habitats, 8);
    assert_eq!(world.dataset.species_count(), 32);
    for o in &world.dataset.observations {
        let h = world.habitat_at(o.lat, o.lon).unwrap();
        assert_eq!(world.truth.species_habitat[o.species_id as usize], h);
    }
}

#[test]
fn pairing_never_mixes_species() {
    for seed in 0..3 {
        let world = generate_synthetic_world(&SyntheticWorldConfig {
            seed,
            ..SyntheticWorldConfig::default()
        })
        .unwrap();
        let ds = &world.dataset;
        let out = pair_samples(ds, DEFAULT_MATCH_RADIUS, seed).unwrap();
        assert!(!out.samples.is_empty());
        for s in &out.samples {
            assert_eq!(ds.texts[s.text].species_id, s.location.species_id);
            let (a, b) = (&ds.tiles[s.tile_a], &ds.tiles[s.tile_b]);
            assert_eq!((a.lat, a.lon), (b.lat, b.lon));
            assert_ne!(a.timestamp, b.timestamp);
            assert!(s.covariates.iter().all(|c| (-1.0..=1.0).contains(c)));
        }
        assert_eq!(
            out.samples.len() + out.skipped.total(),
            ds.observations.len()
        );
    }
}

#[test]
fn pairing_a_prefix_reproduces_its_samples() {
    let world = generate_synthetic_world(&SyntheticWorldConfig::default()).unwrap();
    let full = pair_samples(&world.dataset, DEFAULT_MATCH_RADIUS, 11).unwrap();
    let mut head = world.dataset.clone();
    head.observations.truncate(100);
    let part = pair_samples(&head, DEFAULT_MATCH_RADIUS, 11).unwrap();
    let expect: Vec<_> = full
        .samples
        .iter()
        .filter(|s| s.observation < 100)
        .cloned()
        .collect();
    assert_eq!(part.samples, expect);
}

#[test]
fn written_world_reads_back() {
    let world = generate_synthetic_world(&SyntheticWorldConfig {
        seed: 2,
        ..SyntheticWorldConfig::default()
    })
    .unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_world(&world, dir.path()).unwrap();
    assert_eq!(ingest_dataset(dir.path()).unwrap(), world.dataset);
}
