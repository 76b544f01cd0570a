use proptest::prelude::*;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use wildsat::numerics::{
    finite_diff_check, l2_normalize_rows, AdamConfig, AdamState, GradCheckOptions, Gradients,
    Inputs, NodeId, NormStats, ParameterStore, Tape, Tensor,
};
use wildsat::seed::rng_for;

const SEEDS: u64 = 20;

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let len = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..len).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

/// Reduces `out` to a scalar by a fixed random weighting so every output
/// element carries a distinct cotangent.
fn weighted_sum(tape: &mut Tape, rng: &mut ChaCha8Rng, out: NodeId, shape: &[usize]) {
    let w = tape.constant(random(rng, shape));
    let prod = tape.mul(out, w);
    let s = tape.sum(prod);
    tape.set_output("loss", s);
}

struct Case {
    tape: Tape,
    params: ParameterStore,
}

fn build(seed: u64, op: &str) -> Case {
    let mut rng = rng_for(seed, &[99, op.len() as u64]);
    let mut tape = Tape::new();
    let mut params = ParameterStore::new();
    let mut param = |tape: &mut Tape, name: &str, shape: &[usize], rng: &mut ChaCha8Rng| {
        params.insert(name, random(rng, shape), true).unwrap();
        tape.param(name)
    };
    let (out, shape): (NodeId, Vec<usize>) = match op {
        "matmul" => {
            let a = param(&mut tape, "a", &[3, 4], &mut rng);
            let b = param(&mut tape, "b", &[4, 5], &mut rng);
            (tape.matmul(a, b), vec![3, 5])
        }
        "transpose" => {
            let a = param(&mut tape, "a", &[3, 4], &mut rng);
            (tape.transpose(a), vec![4, 3])
        }
        "add" => {
            let a = param(&mut tape, "a", &[3, 4], &mut rng);
            let b = param(&mut tape, "b", &[3, 4], &mut rng);
            (tape.add(a, b), vec![3, 4])
        }
        "mul" => {
            let a = param(&mut tape, "a", &[3, 4], &mut rng);
            let b = param(&mut tape, "b", &[3, 4], &mut rng);
            (tape.mul(a, b), vec![3, 4])
        }
        "add_bias" => {
            let a = param(&mut tape, "a", &[3, 4], &mut rng);
            let b = param(&mut tape, "b", &[4], &mut rng);
            (tape.add_bias(a, b), vec![3, 4])
        }
        "scale" => {
            let a = param(&mut tape, "a", &[3, 4], &mut rng);
            (tape.scale(a, -2.5), vec![3, 4])
        }
        "relu" => {
            let a = param(&mut tape, "a", &[4, 5], &mut rng);
            (tape.relu(a), vec![4, 5])
        }
        "conv2d" => {
            let x = param(&mut tape, "x", &[2, 5, 5, 2], &mut rng);
            let k = param(&mut tape, "k", &[3, 3, 2, 3], &mut rng);
            (tape.conv2d(x, k, 2, 1), vec![2, 3, 3, 3])
        }
        "global_avg_pool" => {
            let x = param(&mut tape, "x", &[2, 3, 3, 4], &mut rng);
            (tape.global_avg_pool(x), vec![2, 4])
        }
        "scale_shift_norm_batch" => {
            let x = param(&mut tape, "x", &[2, 3, 3, 4], &mut rng);
            let g = param(&mut tape, "g", &[4], &mut rng);
            let b = param(&mut tape, "b", &[4], &mut rng);
            (
                tape.scale_shift_norm(x, g, b, NormStats::Batch),
                vec![2, 3, 3, 4],
            )
        }
        "scale_shift_norm_fixed" => {
            let x = param(&mut tape, "x", &[5, 3], &mut rng);
            let g = param(&mut tape, "g", &[3], &mut rng);
            let b = param(&mut tape, "b", &[3], &mut rng);
            let stats = NormStats::Fixed {
                mean: vec![0.1, -0.2, 0.3],
                var: vec![0.5, 1.5, 2.0],
            };
            (tape.scale_shift_norm(x, g, b, stats), vec![5, 3])
        }
        "l2_normalize_rows" => {
            let a = param(&mut tape, "a", &[4, 5], &mut rng);
            (tape.l2_normalize_rows(a), vec![4, 5])
        }
        "log_sum_exp_rows" => {
            let a = param(&mut tape, "a", &[4, 6], &mut rng);
            let scaled = tape.scale(a, 8.0);
            (tape.log_sum_exp_rows(scaled), vec![4])
        }
        "sum" => {
            let a = param(&mut tape, "a", &[3, 4], &mut rng);
            let s = tape.sum(a);
            (s, vec![1])
        }
        "mean" => {
            let a = param(&mut tape, "a", &[3, 4], &mut rng);
            (tape.mean(a), vec![1])
        }
        "concat" => {
            let a = param(&mut tape, "a", &[3, 2], &mut rng);
            let b = param(&mut tape, "b", &[3, 4], &mut rng);
            (tape.concat(vec![a, b]), vec![3, 6])
        }
        "slice_rows" => {
            let a = param(&mut tape, "a", &[6, 3], &mut rng);
            (tape.slice_rows(a, 2, 5), vec![3, 3])
        }
        other => panic!("no case for {other}"),
    };
    let scalar_out = matches!(op, "sum" | "mean");
    if scalar_out {
        let sq = tape.mul(out, out);
        tape.set_output("loss", sq);
    } else {
        weighted_sum(&mut tape, &mut rng, out, &shape);
    }
    Case { tape, params }
}

const OPS: [&str; 17] = [
    "matmul",
    "transpose",
    "add",
    "mul",
    "add_bias",
    "scale",
    "relu",
    "conv2d",
    "global_avg_pool",
    "scale_shift_norm_batch",
    "scale_shift_norm_fixed",
    "l2_normalize_rows",
    "log_sum_exp_rows",
    "sum",
    "mean",
    "concat",
    "slice_rows",
];

#[test]
fn every_op_passes_gradcheck_over_twenty_seeds() {
    let opts = GradCheckOptions::default();
    for op in OPS {
        for seed in 0..SEEDS {
            let mut case = build(seed, op);
            let report =
                finite_diff_check(&mut case.tape, &case.params, &Inputs::new(), "loss", &opts)
                    .unwrap();
            assert!(
                report.pass,
                "{op} seed {seed}: max rel error {:e} at {:?}",
                report.max_rel_error, report.worst
            );
            assert!(report.checked > 0);
        }
    }
}

#[test]
fn backward_is_linear_in_the_output() {
    for seed in 0..SEEDS {
        let mut rng = rng_for(seed, &[7]);
        let mut params = ParameterStore::new();
        params.insert("w", random(&mut rng, &[4, 3]), true).unwrap();
        params.insert("b", random(&mut rng, &[3]), true).unwrap();
        let mut inputs = Inputs::new();
        inputs.insert("x".into(), random(&mut rng, &[5, 4]));
        let (a, b) = (rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0));

        let mut tape = Tape::new();
        let x = tape.input("x");
        let w = tape.param("w");
        let bias = tape.param("b");
        let xw = tape.matmul(x, w);
        let h = tape.add_bias(xw, bias);
        let n = tape.l2_normalize_rows(h);
        let r = tape.relu(n);
        let l1 = tape.sum(r);
        let lse = tape.log_sum_exp_rows(h);
        let l2 = tape.mean(lse);
        let al1 = tape.scale(l1, a);
        let bl2 = tape.scale(l2, b);
        let combo = tape.add(al1, bl2);
        tape.set_output("l1", l1);
        tape.set_output("l2", l2);
        tape.set_output("combo", combo);
        tape.forward_eval(&params, &inputs).unwrap();

        let g1 = tape.backward(&params, "l1").unwrap();
        let g2 = tape.backward(&params, "l2").unwrap();
        let gc = tape.backward(&params, "combo").unwrap();
        for name in ["w", "b"] {
            let expect = g1[name].zip_map(&g2[name], |p, q| a * p + b * q);
            assert!(gc[name].max_abs_diff(&expect) < 1e-10, "seed {seed} {name}");
        }
    }
}

#[test]
fn replay_is_bit_identical() {
    let mut case = build(3, "conv2d");
    let first = case
        .tape
        .forward_eval(&case.params, &Inputs::new())
        .unwrap();
    let json = case.tape.to_json();
    let mut replayed = Tape::from_json(&json).unwrap();
    for _ in 0..3 {
        let again = case
            .tape
            .forward_eval(&case.params, &Inputs::new())
            .unwrap();
        assert!(again["loss"].bit_eq(&first["loss"]));
        let other = replayed.forward_eval(&case.params, &Inputs::new()).unwrap();
        assert!(other["loss"].bit_eq(&first["loss"]));
    }
}

#[test]
fn adam_zero_gradient_keeps_parameters_bitwise() {
    let mut rng = rng_for(1, &[]);
    let mut params = ParameterStore::new();
    params.insert("w", random(&mut rng, &[3, 3]), true).unwrap();
    let before = params.clone();
    let mut adam = AdamState::new(AdamConfig::with_lr(0.1));
    let zero: Gradients = [("w".to_string(), Tensor::zeros(&[3, 3]))].into();
    for _ in 0..50 {
        adam.step(&mut params, &zero).unwrap();
        assert!(params.get("w").unwrap().bit_eq(before.get("w").unwrap()));
    }
    assert_eq!(adam.t, 50);
}

fn matrix() -> impl Strategy<Value = Tensor> {
    (1usize..5, 1usize..6).prop_flat_map(|(n, d)| {
        prop::collection::vec(-100.0f64..100.0, n * d).prop_filter_map("zero row", move |v| {
            let t = Tensor::new(vec![n, d], v).unwrap();
            (0..n)
                .all(|i| t.row(i).iter().map(|x| x * x).sum::<f64>() > 1e-6)
                .then_some(t)
        })
    })
}

proptest! {
    #[test]
    fn normalize_is_idempotent(m in matrix()) {
        let once = l2_normalize_rows(&m).unwrap();
        let twice = l2_normalize_rows(&once).unwrap();
        prop_assert!(once.max_abs_diff(&twice) < 1e-12);
    }

    #[test]
    fn normalize_ignores_positive_scale(m in matrix(), c in 1e-3f64..1e3) {
        let scaled = m.map(|x| c * x);
        let a = l2_normalize_rows(&m).unwrap();
        let b = l2_normalize_rows(&scaled).unwrap();
        prop_assert!(a.max_abs_diff(&b) < 1e-12);
    }
}
