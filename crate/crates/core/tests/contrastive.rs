use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use wildsat::contrastive::{
    info_nce, pairwise_loss, pairwise_loss_node, wildsat_loss, EmbeddingBatch, Modality,
    WildSatBatches, DEFAULT_TEMPERATURE,
};
use wildsat::numerics::{l2_normalize_rows, Inputs, ParameterStore, Tape, Tensor};
use wildsat::seed::rng_for;

fn unit_rows(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Tensor {
    let raw = Tensor::new(
        vec![n, d],
        (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )
    .unwrap();
    l2_normalize_rows(&raw).unwrap()
}

fn batch(m: Modality, t: Tensor) -> EmbeddingBatch {
    EmbeddingBatch::new(m, t).unwrap()
}

fn pair(seed: u64, n: usize, d: usize) -> (EmbeddingBatch, EmbeddingBatch) {
    let mut rng = rng_for(seed, &[]);
    (
        batch(Modality::TxtHead, unit_rows(&mut rng, n, d)),
        batch(Modality::ETxt, unit_rows(&mut rng, n, d)),
    )
}

#[test]
fn aligned_orthogonal_pair_closed_form() {
    let e = batch(Modality::ETxt, Tensor::identity(2));
    for tau in [0.07, 0.5, 1.0] {
        let got = info_nce(&[1.0, 0.0], &e, 0, tau);
        let want = (1.0 + (-1.0 / tau).exp()).ln();
        assert!((got - want).abs() < 1e-9, "tau {tau}");
    }
    assert!((info_nce(&[1.0, 0.0], &e, 0, 1.0) - 0.31326).abs() < 1e-5);
}

#[test]
fn orthonormal_four_batch_closed_form() {
    let z = batch(Modality::TxtHead, Tensor::identity(4));
    let e = batch(Modality::ETxt, Tensor::identity(4));
    let tau = DEFAULT_TEMPERATURE;
    let per_term = -((1.0 / tau).exp() / ((1.0 / tau).exp() + 3.0)).ln();
    let got = pairwise_loss(&z, &e, tau).unwrap();
    assert!((got - per_term).abs() < 1e-15);
    assert!((got - 3.0 * (-1.0 / tau).exp()).abs() < 1e-10);
}

#[test]
fn single_sample_is_zero() {
    let (z, e) = pair(1, 1, 8);
    assert_eq!(info_nce(z.row(0), &e, 0, 0.07), 0.0);
    assert_eq!(pairwise_loss(&z, &e, 0.07).unwrap(), 0.0);
}

#[test]
fn random_batches_average_to_log_n() {
    // with near-zero logits the softmax is uniform over n candidates
    let (n, d) = (64, 64);
    let mut rng = rng_for(0, &[3]);
    let mut total = 0.0;
    for _ in 0..1000 {
        let z = unit_rows(&mut rng, 1, d);
        let e = batch(Modality::ETxt, unit_rows(&mut rng, n, d));
        total += info_nce(z.row(0), &e, rng.random_range(0..n), 1.0);
    }
    let mean = total / 1000.0;
    assert!((mean - (n as f64).ln()).abs() < 0.1, "mean {mean}");
}

#[test]
fn identical_pairs_triple_the_single_loss() {
    let (z, e) = pair(4, 6, 8);
    let single = pairwise_loss(&z, &e, 0.07).unwrap();
    let b = wildsat_loss(
        WildSatBatches {
            image_t1: &z,
            image_t2: &e,
            txt_head: &z,
            e_txt: &e,
            loc_head: &z,
            e_loc: &e,
        },
        0.07,
    )
    .unwrap();
    assert!((b.total - 3.0 * single).abs() < 1e-12);
    assert_eq!(b.total, b.img + b.txt + b.loc);
}

#[test]
fn tape_loss_matches_direct_loss() {
    for seed in 0..10 {
        let (z, e) = pair(seed, 7, 5);
        let mut tape = Tape::new();
        let zn = tape.input("z");
        let en = tape.input("e");
        let l = pairwise_loss_node(&mut tape, zn, en, 7, 0.07);
        tape.set_output("loss", l);
        let mut inputs = Inputs::new();
        inputs.insert("z".into(), z.rows().clone());
        inputs.insert("e".into(), e.rows().clone());
        let out = tape.forward_eval(&ParameterStore::new(), &inputs).unwrap();
        let direct = pairwise_loss(&z, &e, 0.07).unwrap();
        assert!((out["loss"].data()[0] - direct).abs() < 1e-12);
    }
}

#[test]
fn near_parallel_batches_stay_finite() {
    let mut rng = rng_for(8, &[]);
    let d = 16;
    let base: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
    let rows: Vec<f64> = (0..32)
        .flat_map(|_| {
            base.iter()
                .map(|b| b + rng.random_range(-1e-6..1e-6))
                .collect::<Vec<_>>()
        })
        .collect();
    let t = l2_normalize_rows(&Tensor::new(vec![32, d], rows).unwrap()).unwrap();
    let mut params = ParameterStore::new();
    params.insert("z", t.clone(), true).unwrap();
    params.insert("e", t, true).unwrap();
    let mut tape = Tape::new();
    let z = tape.param("z");
    let e = tape.param("e");
    let l = pairwise_loss_node(&mut tape, z, e, 32, 0.07);
    tape.set_output("loss", l);
    let out = tape.forward_eval(&params, &Inputs::new()).unwrap();
    assert!(out["loss"].is_finite());
    let grads = tape.backward(&params, "loss").unwrap();
    assert!(grads.values().all(|g| g.is_finite()));
}

#[test]
fn halving_temperature_changes_the_loss() {
    let (z, e) = pair(12, 8, 6);
    let a = pairwise_loss(&z, &e, 0.5).unwrap();
    let b = pairwise_loss(&z, &e, 0.25).unwrap();
    assert!((a - b).abs() > 1e-6);
    // continuity in tau
    let c = pairwise_loss(&z, &e, 0.5 + 1e-9).unwrap();
    assert!((a - c).abs() < 1e-6);
}

#[test]
fn bad_inputs_rejected() {
    let (z, _) = pair(1, 4, 3);
    let (_, e) = pair(2, 5, 3);
    assert!(pairwise_loss(&z, &e, 0.07).is_err());
    let (z, e) = pair(3, 4, 3);
    assert!(pairwise_loss(&z, &e, 0.0).is_err());
    let not_unit = Tensor::new(vec![1, 2], vec![1.0, 1.0]).unwrap();
    assert!(EmbeddingBatch::new(Modality::ELoc, not_unit).is_err());
}

proptest! {
    #[test]
    fn symmetric_in_its_arguments(seed in any::<u64>(), n in 1usize..12, d in 1usize..9) {
        let (z, e) = pair(seed, n, d);
        let ab = pairwise_loss(&z, &e, 0.07).unwrap();
        let ba = pairwise_loss(&e, &z, 0.07).unwrap();
        prop_assert!((ab - ba).abs() < 1e-12);
    }

    #[test]
    fn permutation_equivariant(seed in any::<u64>(), n in 1usize..12) {
        let (z, e) = pair(seed, n, 5);
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng_for(seed, &[1]));
        let base = pairwise_loss(&z, &e, 0.07).unwrap();
        let moved = pairwise_loss(&z.permuted(&perm), &e.permuted(&perm), 0.07).unwrap();
        prop_assert!((base - moved).abs() < 1e-12);
    }

    #[test]
    fn info_nce_is_non_negative(seed in any::<u64>(), n in 1usize..12, tau in 0.01f64..2.0) {
        let (z, e) = pair(seed, n, 4);
        for i in 0..n {
            prop_assert!(info_nce(z.row(i), &e, i, tau) >= 0.0);
        }
    }

    #[test]
    fn raising_the_positive_logit_lowers_the_loss(
        seed in any::<u64>(),
        n in 2usize..10,
        a in 0.05f64..1.5,
        da in 0.01f64..0.05,
    ) {
        // e_0 is axis 0; the other rows live on axes 1..d-1; z moves in the
        // plane of axes 0 and d-1, so every negative logit stays at 0
        let d = n + 2;
        let mut rng = rng_for(seed, &[2]);
        let mut rows = Tensor::zeros(&[n, d]);
        rows.data_mut()[0] = 1.0;
        for j in 1..n {
            for k in 1..d - 1 {
                rows.data_mut()[j * d + k] = rng.random_range(0.1..1.0);
            }
        }
        let e = batch(Modality::ETxt, l2_normalize_rows(&rows).unwrap());
        let z_at = |a: f64| {
            let mut z = vec![0.0; d];
            z[0] = a.cos();
            z[d - 1] = a.sin();
            z
        };
        let far = info_nce(&z_at(a), &e, 0, 0.5);
        let near = info_nce(&z_at(a - da), &e, 0, 0.5);
        prop_assert!(near < far);
    }
}
