//! Probe protocol on tile datasets: site-grouped train/test splits, label
//! derivation from observations, and metric reports.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::metrics::{accuracy, confusion_matrix, mean_top_k_accuracy, micro_f1};
use super::probe::{fit_linear_probe, ProbeConfig, ProbeTargets, ProbeTask};
use super::{EvalError, MULTILABEL_THRESHOLD};
use crate::geodata::{GeoDataset, TileRecord};
use crate::numerics::Tensor;

/// Tile indices on each side of a split. Acquisitions sharing a center
/// always land on the same side.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SiteSplit {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// Site of every tile, numbered by first appearance.
pub fn tile_sites(tiles: &[TileRecord]) -> Vec<usize> {
    let mut ids: BTreeMap<(u64, u64), usize> = BTreeMap::new();
    tiles
        .iter()
        .map(|t| {
            let next = ids.len();
            *ids.entry((t.lat.to_bits(), t.lon.to_bits()))
                .or_insert(next)
        })
        .collect()
}

/// The first `per_class` sites of each class (in tile order) train; the
/// rest test. A site's class is the label of its first tile.
pub fn site_split_by_class(tiles: &[TileRecord], labels: &[usize], per_class: usize) -> SiteSplit {
    let sites = tile_sites(tiles);
    let mut taken: BTreeMap<usize, BTreeSet<usize>> = BTreeMap::new();
    let mut site_train: BTreeMap<usize, bool> = BTreeMap::new();
    let mut split = SiteSplit {
        train: Vec::new(),
        test: Vec::new(),
    };
    for (i, &s) in sites.iter().enumerate() {
        let is_train = *site_train.entry(s).or_insert_with(|| {
            let class = taken.entry(labels[i]).or_default();
            if class.len() < per_class {
                class.insert(s);
                true
            } else {
                false
            }
        });
        if is_train {
            split.train.push(i);
        } else {
            split.test.push(i);
        }
    }
    split
}

/// Even-numbered sites train, odd-numbered sites test.
pub fn site_split_alternating(tiles: &[TileRecord]) -> SiteSplit {
    let mut split = SiteSplit {
        train: Vec::new(),
        test: Vec::new(),
    };
    for (i, s) in tile_sites(tiles).into_iter().enumerate() {
        if s % 2 == 0 {
            split.train.push(i);
        } else {
            split.test.push(i);
        }
    }
    split
}

/// Per-tile observation counts by species within `radius` degrees of the
/// tile center.
fn species_counts(dataset: &GeoDataset, radius: f64) -> Vec<Vec<usize>> {
    let m = dataset.species_count();
    dataset
        .tiles
        .iter()
        .map(|t| {
            let mut counts = vec![0; m];
            for o in &dataset.observations {
                if (o.lat - t.lat).hypot(o.lon - t.lon) <= radius {
                    counts[o.species_id as usize] += 1;
                }
            }
            counts
        })
        .collect()
}

/// Species observed within `radius` of each tile.
pub fn species_sets_at_tiles(dataset: &GeoDataset, radius: f64) -> Vec<BTreeSet<usize>> {
    species_counts(dataset, radius)
        .into_iter()
        .map(|c| (0..c.len()).filter(|&s| c[s] > 0).collect())
        .collect()
}

/// Share of nearby observations belonging to each species; all zeros when
/// nothing was observed near the tile.
pub fn encounter_rates_at_tiles(dataset: &GeoDataset, radius: f64) -> Vec<Vec<f64>> {
    species_counts(dataset, radius)
        .into_iter()
        .map(|c| {
            let total: usize = c.iter().sum();
            c.iter()
                .map(|&k| {
                    if total == 0 {
                        0.0
                    } else {
                        k as f64 / total as f64
                    }
                })
                .collect()
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub task: ProbeTask,
    pub train_size: usize,
    pub test_size: usize,
    /// `accuracy`, `micro_f1` or `top_k_accuracy`.
    pub metric: String,
    pub train_value: f64,
    pub test_value: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub confusion_matrix: Option<Vec<Vec<usize>>>,
    /// Test samples without any observed species (encounter task only).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub skipped: Option<usize>,
}

fn rows(x: &Tensor, idx: &[usize]) -> Tensor {
    let d = x.shape()[1];
    let data = idx.iter().flat_map(|&i| x.row(i).iter().copied()).collect();
    Tensor::new(vec![idx.len(), d], data).unwrap()
}

fn subset<T: Clone>(v: &[T], idx: &[usize]) -> Vec<T> {
    idx.iter().map(|&i| v[i].clone()).collect()
}

/// Fits a probe on the train rows of `features` and scores both sides.
pub fn run_probe(
    features: &Tensor,
    targets: &ProbeTargets,
    task: ProbeTask,
    split: &SiteSplit,
    config: &ProbeConfig,
) -> Result<ProbeReport, EvalError> {
    if split.train.is_empty() || split.test.is_empty() {
        return Err(EvalError::Task("probe split leaves one side empty".into()));
    }
    let (train_x, test_x) = (rows(features, &split.train), rows(features, &split.test));
    let report = |metric: &str, tr: f64, te: f64| ProbeReport {
        task,
        train_size: split.train.len(),
        test_size: split.test.len(),
        metric: metric.into(),
        train_value: tr,
        test_value: te,
        confusion_matrix: None,
        skipped: None,
    };
    match targets {
        ProbeTargets::Classes { labels, classes } => {
            let (tr_y, te_y) = (subset(labels, &split.train), subset(labels, &split.test));
            let head = fit_linear_probe(
                &train_x,
                &ProbeTargets::Classes {
                    labels: tr_y.clone(),
                    classes: *classes,
                },
                task,
                config,
            )?;
            let te_pred = head.predict_classes(&test_x)?;
            let mut r = report(
                "accuracy",
                accuracy(&head.predict_classes(&train_x)?, &tr_y)?,
                accuracy(&te_pred, &te_y)?,
            );
            r.confusion_matrix = Some(confusion_matrix(&te_pred, &te_y, *classes)?);
            Ok(r)
        }
        ProbeTargets::Sets { sets, classes } => {
            let (tr_y, te_y) = (subset(sets, &split.train), subset(sets, &split.test));
            let head = fit_linear_probe(
                &train_x,
                &ProbeTargets::Sets {
                    sets: tr_y.clone(),
                    classes: *classes,
                },
                task,
                config,
            )?;
            Ok(report(
                "micro_f1",
                micro_f1(&head.predict_sets(&train_x, MULTILABEL_THRESHOLD)?, &tr_y)?,
                micro_f1(&head.predict_sets(&test_x, MULTILABEL_THRESHOLD)?, &te_y)?,
            ))
        }
        ProbeTargets::Rates(rates) => {
            let (tr_y, te_y) = (subset(rates, &split.train), subset(rates, &split.test));
            let head =
                fit_linear_probe(&train_x, &ProbeTargets::Rates(tr_y.clone()), task, config)?;
            let observed = |ys: &[Vec<f64>]| -> Vec<BTreeSet<usize>> {
                ys.iter()
                    .map(|r| (0..r.len()).filter(|&s| r[s] > 0.0).collect())
                    .collect()
            };
            let as_rows = |p: Tensor| -> Vec<Vec<f64>> {
                let k = p.shape()[1];
                p.data().chunks_exact(k).map(<[f64]>::to_vec).collect()
            };
            let (tr_v, _) =
                mean_top_k_accuracy(&as_rows(head.predict_proba(&train_x)?), &observed(&tr_y))?;
            let (te_v, skipped) =
                mean_top_k_accuracy(&as_rows(head.predict_proba(&test_x)?), &observed(&te_y))?;
            let mut r = report("top_k_accuracy", tr_v, te_v);
            r.skipped = Some(skipped);
            Ok(r)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tile(id: u64, lat: f64) -> TileRecord {
        TileRecord {
            tile_id: id,
            lat,
            lon: 0.0,
            timestamp: id as i64,
            channels: 1,
            height: 1,
            width: 1,
            pixels: vec![0.0],
        }
    }

    #[test]
    fn split_keeps_sites_together() {
        let tiles = vec![
            tile(0, 1.0),
            tile(1, 1.0),
            tile(2, 2.0),
            tile(3, 2.0),
            tile(4, 3.0),
        ];
        let labels = vec![0, 0, 0, 0, 1];
        let s = site_split_by_class(&tiles, &labels, 1);
        assert_eq!(s.train, vec![0, 1, 4]);
        assert_eq!(s.test, vec![2, 3]);
        let a = site_split_alternating(&tiles);
        assert_eq!(a.train, vec![0, 1, 4]);
    }
}
