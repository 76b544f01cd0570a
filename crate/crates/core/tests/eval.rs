use std::collections::BTreeSet;

use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::Rng;

use wildsat::encoders::{ModelConfig, WildSatModel};
use wildsat::eval::{
    accuracy, build_index, mean_iou, micro_f1, query_index, run_probe, site_split_by_class,
    top_k_accuracy, zero_shot_batch, ProbeConfig, ProbeTargets, ProbeTask, RetrievalIndex,
};
use wildsat::geodata::{generate_synthetic_world, SyntheticWorldConfig};
use wildsat::numerics::{l2_normalize_rows, Tensor};
use wildsat::seed::rng_for;

fn bits(mask: u32) -> BTreeSet<usize> {
    (0..4).filter(|i| mask >> i & 1 == 1).collect()
}

/// F1 as the harmonic mean of precision and recall.
fn f1_oracle(pred: u32, truth: u32) -> f64 {
    let (np, nt) = (pred.count_ones(), truth.count_ones());
    if np == 0 && nt == 0 {
        return 1.0;
    }
    let tp = (pred & truth).count_ones();
    if tp == 0 {
        return 0.0;
    }
    let p = tp as f64 / np as f64;
    let r = tp as f64 / nt as f64;
    2.0 * p * r / (p + r)
}

#[test]
fn micro_f1_matches_brute_force_on_every_subset_pair() {
    for p in 0..16 {
        for t in 0..16 {
            let got = micro_f1(&[bits(p)], &[bits(t)]).unwrap();
            assert!((got - f1_oracle(p, t)).abs() < 1e-15, "{p:04b} {t:04b}");
        }
    }
}

#[test]
fn micro_f1_pools_counts_across_samples() {
    let mut rng = rng_for(1, &[]);
    for _ in 0..200 {
        let n = rng.random_range(1..6);
        let p: Vec<u32> = (0..n).map(|_| rng.random_range(0..16)).collect();
        let t: Vec<u32> = (0..n).map(|_| rng.random_range(0..16)).collect();
        // pooling n samples over 4 classes is one sample over 4n classes
        let wide = |v: &[u32]| v.iter().fold(0u64, |acc, &m| acc << 4 | m as u64);
        let (wp, wt) = (wide(&p), wide(&t));
        let tp = (wp & wt).count_ones() as f64;
        let (np, nt) = (wp.count_ones() as f64, wt.count_ones() as f64);
        let want = if np + nt == 0.0 {
            1.0
        } else {
            2.0 * tp / (np + nt)
        };
        let sets = |v: &[u32]| v.iter().map(|&m| bits(m)).collect::<Vec<_>>();
        let got = micro_f1(&sets(&p), &sets(&t)).unwrap();
        assert!((got - want).abs() < 1e-15);
    }
}

fn labels(code: usize, len: usize, k: usize) -> Vec<usize> {
    (0..len).map(|i| code / k.pow(i as u32) % k).collect()
}

#[test]
fn mean_iou_and_accuracy_match_brute_force() {
    let (len, k) = (4usize, 3usize);
    let total = k.pow(len as u32);
    for a in 0..total {
        for b in 0..total {
            let (p, t) = (labels(a, len, k), labels(b, len, k));
            let mut ious = Vec::new();
            for c in 0..k {
                let inter = (0..len).filter(|&i| p[i] == c && t[i] == c).count();
                let union = (0..len).filter(|&i| p[i] == c || t[i] == c).count();
                if union > 0 {
                    ious.push(inter as f64 / union as f64);
                }
            }
            let want = ious.iter().sum::<f64>() / ious.len() as f64;
            assert!((mean_iou(&p, &t, k).unwrap() - want).abs() < 1e-15);
            let hits = (0..len).filter(|&i| p[i] == t[i]).count();
            assert_eq!(accuracy(&p, &t).unwrap(), hits as f64 / len as f64);
        }
    }
}

fn distinct_rates(rng: &mut impl Rng, m: usize) -> Vec<f64> {
    let mut r: Vec<f64> = (0..m).map(|i| (i as f64 + 0.5) / m as f64).collect();
    r.shuffle(rng);
    r
}

#[test]
fn top_k_matches_brute_force() {
    let mut rng = rng_for(2, &[]);
    for m in 1..=6usize {
        for _ in 0..20 {
            let rates = distinct_rates(&mut rng, m);
            for mask in 0u32..1 << m {
                let observed: BTreeSet<usize> = (0..m).filter(|i| mask >> i & 1 == 1).collect();
                let got = top_k_accuracy(&rates, &observed);
                if observed.is_empty() {
                    assert_eq!(got, None);
                    continue;
                }
                let k = observed.len();
                let hits = observed
                    .iter()
                    .filter(|&&s| rates.iter().filter(|&&r| r > rates[s]).count() < k)
                    .count();
                assert_eq!(got, Some(hits as f64 / k as f64));
            }
        }
    }
}

proptest! {
    #[test]
    fn top_k_ignores_monotone_transforms(seed in any::<u64>(), m in 1usize..=6, mask in any::<u32>()) {
        let rates = distinct_rates(&mut rng_for(seed, &[]), m);
        let observed: BTreeSet<usize> = (0..m).filter(|i| mask >> i & 1 == 1).collect();
        let moved: Vec<f64> = rates.iter().map(|r| (3.0 * r).exp() + 1.0).collect();
        prop_assert_eq!(top_k_accuracy(&rates, &observed), top_k_accuracy(&moved, &observed));
    }
}

fn random_index(seed: u64, n: usize, d: usize) -> RetrievalIndex {
    let mut rng = rng_for(seed, &[]);
    let emb = Tensor::new(
        vec![n, d],
        (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )
    .unwrap();
    RetrievalIndex::new((100..100 + n as u64).collect(), &emb).unwrap()
}

#[test]
fn retrieval_ignores_query_scale_and_finds_its_own_rows() {
    let idx = random_index(3, 30, 6);
    let mut rng = rng_for(4, &[]);
    for _ in 0..50 {
        let q: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
        let base = idx.query(&q, 10).unwrap();
        let scaled: Vec<f64> = q.iter().map(|v| 7.5 * v).collect();
        let again = idx.query(&scaled, 10).unwrap();
        let ids = |h: &[(u64, f64)]| h.iter().map(|x| x.0).collect::<Vec<_>>();
        assert_eq!(ids(&base), ids(&again));
        assert!(base.windows(2).all(|w| w[0].1 >= w[1].1));
    }
    for i in 0..idx.len() {
        let hits = idx.query(idx.embeddings().row(i), 1).unwrap();
        assert_eq!(hits[0].0, idx.tile_ids()[i]);
        assert!((hits[0].1 - 1.0).abs() < 1e-12);
    }
    assert_eq!(idx.query(&[1.0; 6], 1000).unwrap().len(), 30);
}

#[test]
fn index_round_trips_through_disk() {
    let idx = random_index(5, 12, 4);
    let dir = tempfile::tempdir().unwrap();
    idx.save(dir.path()).unwrap();
    let back = RetrievalIndex::load(dir.path()).unwrap();
    assert_eq!(back.tile_ids(), idx.tile_ids());
    // rows are stored as f32
    assert!(back.embeddings().max_abs_diff(idx.embeddings()) < 1e-6);
    let again = tempfile::tempdir().unwrap();
    back.save(again.path()).unwrap();
    assert_eq!(RetrievalIndex::load(again.path()).unwrap(), back);
}

fn world_and_model() -> (wildsat::geodata::SyntheticWorld, WildSatModel) {
    let world = generate_synthetic_world(&SyntheticWorldConfig {
        observations: 64,
        ..SyntheticWorldConfig::default()
    })
    .unwrap();
    let config = ModelConfig {
        d_txt: world.dataset.text_dim().unwrap(),
        ..ModelConfig::default()
    };
    (world, WildSatModel::init(config, 9).unwrap())
}

#[test]
fn zero_shot_agrees_with_a_one_tile_index() {
    let (world, model) = world_and_model();
    let d_txt = model.config.d_txt;
    let mut rng = rng_for(6, &[]);
    let classes = Tensor::new(
        vec![5, d_txt],
        (0..5 * d_txt)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect(),
    )
    .unwrap();
    let tiles: Vec<_> = world.dataset.tiles.iter().take(12).collect();
    let picks = zero_shot_batch(&model, &tiles, &classes).unwrap();
    for (tile, pick) in tiles.iter().zip(picks) {
        let idx = build_index(&model, &[*tile]).unwrap();
        let scores: Vec<f64> = (0..5)
            .map(|c| query_index(&idx, &model, classes.row(c), 1).unwrap()[0].1)
            .collect();
        let best = (0..5).fold(0, |b, c| if scores[c] > scores[b] { c } else { b });
        assert_eq!(pick, best);
    }
}

#[test]
fn probe_leaves_the_encoder_untouched() {
    let (world, model) = world_and_model();
    let hash = model.encoder_hash();
    let tiles: Vec<_> = world.dataset.tiles.iter().collect();
    let features = model.encode_tiles(&tiles).unwrap();
    let labels = world.truth.tile_habitat.clone();
    let split = site_split_by_class(&world.dataset.tiles, &labels, 1);
    let targets = ProbeTargets::Classes {
        labels,
        classes: world.truth.habitats,
    };
    let cfg = ProbeConfig::default();
    run_probe(&features, &targets, ProbeTask::SingleLabel, &split, &cfg).unwrap();
    assert_eq!(model.encoder_hash(), hash);
}

#[test]
fn probe_separates_separable_features() {
    let mut rng = rng_for(7, &[]);
    let (world, _) = world_and_model();
    let labels = world.truth.tile_habitat.clone();
    let k = world.truth.habitats;
    let rows: Vec<Vec<f64>> = labels
        .iter()
        .map(|&l| {
            (0..k)
                .map(|c| f64::from(u8::from(c == l)) + rng.random_range(-0.1..0.1))
                .collect()
        })
        .collect();
    let features = l2_normalize_rows(&Tensor::from_rows(&rows).unwrap()).unwrap();
    let split = site_split_by_class(&world.dataset.tiles, &labels, 1);
    let targets = ProbeTargets::Classes { labels, classes: k };
    let r = run_probe(
        &features,
        &targets,
        ProbeTask::SingleLabel,
        &split,
        &ProbeConfig::default(),
    )
    .unwrap();
    assert_eq!(r.test_value, 1.0);
    let cm = r.confusion_matrix.unwrap();
    assert_eq!(cm.iter().flatten().sum::<usize>(), r.test_size);
}
