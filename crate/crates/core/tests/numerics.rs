use motadual::numerics::{grad_check, Graph, NumericsError, Segment, Tensor, Var};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Reduces any tensor to a scalar with fixed random weights so every output
/// entry contributes a distinct cotangent.
fn weighted_sum(g: &mut Graph<f64>, x: Var, seed: u64) -> Var {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xfeed);
    let w = rand_tensor(&mut rng, g.shape(x));
    let w = g.constant(w);
    let p = g.mul(x, w).unwrap();
    g.sum(p)
}

const SEEDS: u64 = 20;
const TOL: f64 = 1e-6;
const EPS: f64 = 1e-5;

fn check_kernel<F>(name: &str, shapes: impl Fn(&mut ChaCha8Rng) -> Vec<Vec<usize>>, f: F)
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Var,
{
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params: Vec<Tensor<f64>> = shapes(&mut rng).iter().map(|s| rand_tensor(&mut rng, s)).collect();
        let report = grad_check(
            |g, vars| {
                let out = f(g, vars);
                Ok(weighted_sum(g, out, seed))
            },
            &params,
            EPS,
        )
        .unwrap();
        assert!(
            report.max_relative_error < TOL,
            "{name} seed {seed}: {report:?}"
        );
    }
}

fn dims(rng: &mut ChaCha8Rng) -> usize {
    rng.gen_range(1..6)
}

#[test]
fn matmul_gradients() {
    check_kernel(
        "matmul",
        |r| {
            let (m, k, n) = (dims(r), dims(r), dims(r));
            vec![vec![m, k], vec![k, n]]
        },
        |g, v| g.matmul(v[0], v[1]).unwrap(),
    );
}

#[test]
fn matmul_3x4_by_4x2() {
    let mut rng = ChaCha8Rng::seed_from_u64(34);
    let params = vec![rand_tensor(&mut rng, &[3, 4]), rand_tensor(&mut rng, &[4, 2])];
    let report = grad_check(
        |g, v| {
            let m = g.matmul(v[0], v[1])?;
            Ok(weighted_sum(g, m, 1))
        },
        &params,
        1e-5,
    )
    .unwrap();
    assert!(report.max_relative_error < 1e-6, "{report:?}");
    assert_eq!(report.entries_checked, 12 + 8);
}

#[test]
fn matmul_nt_and_transpose_gradients() {
    check_kernel(
        "matmul_nt",
        |r| {
            let (m, k, n) = (dims(r), dims(r), dims(r));
            vec![vec![m, k], vec![n, k]]
        },
        |g, v| g.matmul_nt(v[0], v[1]).unwrap(),
    );
    check_kernel(
        "transpose",
        |r| vec![vec![dims(r), dims(r)]],
        |g, v| g.transpose(v[0]).unwrap(),
    );
}

#[test]
fn elementwise_gradients() {
    check_kernel(
        "add/sub/mul",
        |r| {
            let s = vec![dims(r), dims(r)];
            vec![s.clone(), s.clone(), s]
        },
        |g, v| {
            let a = g.add(v[0], v[1]).unwrap();
            let b = g.mul(a, v[2]).unwrap();
            g.sub(b, v[0]).unwrap()
        },
    );
    check_kernel(
        "add_row",
        |r| {
            let c = dims(r);
            vec![vec![dims(r), c], vec![c]]
        },
        |g, v| g.add_row(v[0], v[1]).unwrap(),
    );
    check_kernel(
        "scale/mul_scalar",
        |r| vec![vec![dims(r), dims(r)], vec![1]],
        |g, v| {
            let a = g.scale(v[0], -1.7);
            g.mul_scalar(a, v[1]).unwrap()
        },
    );
}

#[test]
fn concat_slice_gradients() {
    for axis in 0..2 {
        check_kernel(
            "concat",
            |r| {
                let fixed = dims(r);
                (0..3)
                    .map(|_| {
                        let free = dims(r);
                        if axis == 0 {
                            vec![free, fixed]
                        } else {
                            vec![fixed, free]
                        }
                    })
                    .collect()
            },
            |g, v| g.concat(v, axis).unwrap(),
        );
        check_kernel(
            "slice",
            |_| vec![vec![5, 6]],
            |g, v| g.slice(v[0], axis, 1, 3).unwrap(),
        );
    }
}

#[test]
fn gather_and_replace_gradients() {
    check_kernel(
        "gather_rows",
        |r| vec![vec![6, dims(r)]],
        |g, v| g.gather_rows(v[0], &[4, 0, 4, 2]).unwrap(),
    );
    check_kernel(
        "replace_rows",
        |r| {
            let c = dims(r);
            vec![vec![5, c], vec![2, c]]
        },
        |g, v| g.replace_rows(v[0], &[3, 1], v[1]).unwrap(),
    );
}

#[test]
fn softmax_family_gradients() {
    for axis in 0..2 {
        check_kernel(
            "softmax",
            |r| vec![vec![dims(r), dims(r)]],
            |g, v| g.softmax(v[0], axis).unwrap(),
        );
        check_kernel(
            "log_softmax",
            |r| vec![vec![dims(r), dims(r)]],
            |g, v| g.log_softmax(v[0], axis).unwrap(),
        );
        check_kernel(
            "l2_normalize",
            |r| vec![vec![dims(r), dims(r) + 1]],
            |g, v| g.l2_normalize(v[0], axis).unwrap(),
        );
    }
}

#[test]
fn layer_norm_and_gelu_gradients() {
    check_kernel(
        "layer_norm",
        |r| {
            // width 2 normalizes to ±1 regardless of input: gradient is 0
            let c = dims(r) + 2;
            vec![vec![dims(r), c], vec![c], vec![c]]
        },
        |g, v| g.layer_norm(v[0], v[1], v[2]).unwrap(),
    );
    check_kernel("gelu", |r| vec![vec![dims(r), dims(r)]], |g, v| g.gelu(v[0]));
}

#[test]
fn reductions_log_exp_gradients() {
    check_kernel(
        "mean/exp",
        |r| vec![vec![dims(r), dims(r)]],
        |g, v| {
            let e = g.exp(v[0]);
            let m = g.mean(e);
            g.mul_scalar(e, m).unwrap()
        },
    );
    check_kernel(
        "log",
        |r| vec![vec![dims(r), dims(r)]],
        |g, v| {
            // log of a strictly positive input
            let e = g.exp(v[0]);
            g.log(e)
        },
    );
}

fn random_segments(rng: &mut ChaCha8Rng) -> Vec<Segment> {
    let mut segs = Vec::new();
    let mut start = 0;
    for _ in 0..rng.gen_range(1..4) {
        let len = rng.gen_range(1..6);
        let valid = rng.gen_range(1..=len);
        segs.push(Segment { start, len, valid });
        start += len;
    }
    segs
}

#[test]
fn attention_gradients() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let segs = random_segments(&mut rng);
        let heads = rng.gen_range(1..3);
        let rows: usize = segs.iter().map(|s| s.len).sum();
        let params = vec![rand_tensor(&mut rng, &[rows, 3 * 2 * heads])];
        let report = grad_check(
            |g, v| {
                let a = g.attention(v[0], &segs, heads)?;
                Ok(weighted_sum(g, a, seed))
            },
            &params,
            EPS,
        )
        .unwrap();
        assert!(report.max_relative_error < TOL, "seed {seed}: {report:?}");
    }
}

/// Independent route: per-segment, per-head attention from catalogue ops.
fn attention_by_composition(g: &mut Graph<f64>, qkv: Var, segs: &[Segment], heads: usize) -> Var {
    let d = g.shape(qkv)[1] / 3;
    let dh = d / heads;
    let mut seg_outs = Vec::new();
    for s in segs {
        let rows = g.slice(qkv, 0, s.start, s.len).unwrap();
        let mut head_outs = Vec::new();
        for h in 0..heads {
            let q = g.slice(rows, 1, h * dh, dh).unwrap();
            let k_all = g.slice(rows, 1, d + h * dh, dh).unwrap();
            let v_all = g.slice(rows, 1, 2 * d + h * dh, dh).unwrap();
            let k = g.slice(k_all, 0, 0, s.valid).unwrap();
            let v = g.slice(v_all, 0, 0, s.valid).unwrap();
            let scores = g.matmul_nt(q, k).unwrap();
            let scores = g.scale(scores, 1.0 / (dh as f64).sqrt());
            let p = g.softmax(scores, 1).unwrap();
            head_outs.push(g.matmul(p, v).unwrap());
        }
        seg_outs.push(g.concat(&head_outs, 1).unwrap());
    }
    g.concat(&seg_outs, 0).unwrap()
}

#[test]
fn fused_attention_matches_composed_ops() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(500 + seed);
        let segs = random_segments(&mut rng);
        let heads = rng.gen_range(1..4);
        let rows: usize = segs.iter().map(|s| s.len).sum();
        let x = rand_tensor(&mut rng, &[rows, 3 * 3 * heads]);

        let mut g1 = Graph::new();
        let v1 = g1.param(x.clone());
        let a1 = g1.attention(v1, &segs, heads).unwrap();
        let l1 = weighted_sum(&mut g1, a1, seed);
        let mut g2 = Graph::new();
        let v2 = g2.param(x);
        let a2 = attention_by_composition(&mut g2, v2, &segs, heads);
        let l2 = weighted_sum(&mut g2, a2, seed);

        assert!(g1.value(a1).max_abs_diff(g2.value(a2)) < 1e-12);
        let gr1 = g1.backward(l1).unwrap().get_or_zeros(v1);
        let gr2 = g2.backward(l2).unwrap().get_or_zeros(v2);
        assert!(gr1.max_abs_diff(&gr2) < 1e-12, "seed {seed}");
    }
}

#[test]
fn masked_keys_do_not_influence_valid_rows() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = rand_tensor(&mut rng, &[6, 12]);
    let mut y = x.clone();
    for c in 0..12 {
        y.data_mut()[5 * 12 + c] = 99.0;
    }
    let seg = [Segment { start: 0, len: 6, valid: 5 }];
    let mut g = Graph::new();
    let a = g.constant(x);
    let b = g.constant(y);
    let oa = g.attention(a, &seg, 2).unwrap();
    let ob = g.attention(b, &seg, 2).unwrap();
    for r in 0..5 {
        assert_eq!(g.value(oa).row(r), g.value(ob).row(r));
    }
}

#[test]
fn softmax_of_zeros_is_uniform() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::vector(vec![0.0, 0.0]));
    let y = g.softmax(x, 0).unwrap();
    assert_eq!(g.value(y).data(), &[0.5, 0.5]);
}

#[test]
fn l2_normalize_three_four_five() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::vector(vec![3.0, 4.0]));
    let y = g.l2_normalize(x, 0).unwrap();
    let v = g.value(y).data();
    assert!((v[0] - 0.6).abs() < 1e-15 && (v[1] - 0.8).abs() < 1e-15);
}

#[test]
fn l2_normalize_rejects_zero_vector() {
    let mut g = Graph::<f32>::new();
    let x = g.constant(Tensor::zeros(&[2, 3]));
    assert!(matches!(
        g.l2_normalize(x, 1),
        Err(NumericsError::Degenerate { .. })
    ));
}

#[test]
fn shape_mismatch_is_dimension_error() {
    let mut g = Graph::<f32>::new();
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[2, 3]));
    assert!(matches!(g.matmul(a, b), Err(NumericsError::Shape { .. })));
    assert!(matches!(g.softmax(a, 2), Err(NumericsError::Shape { .. })));
}

#[test]
fn backward_of_sum_is_ones() {
    let mut g = Graph::<f64>::new();
    let p = g.param(Tensor::vector(vec![0.3, -1.0, 2.0]));
    let s = g.sum(p);
    let grads = g.backward(s).unwrap();
    assert_eq!(grads.get(p).unwrap().data(), &[1.0, 1.0, 1.0]);
}

#[test]
fn backward_of_half_square_norm_is_identity() {
    let vals = vec![0.3, -1.0, 2.0, 7.5];
    let mut g = Graph::<f64>::new();
    let p = g.param(Tensor::vector(vals.clone()));
    let sq = g.mul(p, p).unwrap();
    let s = g.sum(sq);
    let half = g.scale(s, 0.5);
    let grads = g.backward(half).unwrap();
    assert_eq!(grads.get(p).unwrap().data(), vals.as_slice());
}

#[test]
fn backward_requires_scalar_and_single_use() {
    let mut g = Graph::<f64>::new();
    let p = g.param(Tensor::vector(vec![1.0, 2.0]));
    assert!(matches!(g.backward(p), Err(NumericsError::Contract(_))));
    let s = g.sum(p);
    g.backward(s).unwrap();
    assert!(matches!(g.backward(s), Err(NumericsError::Contract(_))));
}

#[test]
fn frozen_leaves_get_no_gradient() {
    let mut g = Graph::<f64>::new();
    let p = g.param(Tensor::vector(vec![1.0, 2.0]));
    let c = g.constant(Tensor::vector(vec![3.0, 4.0]));
    let m = g.mul(p, c).unwrap();
    let s = g.sum(m);
    let grads = g.backward(s).unwrap();
    assert!(grads.get(c).is_none());
    assert_eq!(grads.get(p).unwrap().data(), &[3.0, 4.0]);
}

#[test]
fn grad_check_sum_of_squares() {
    let report = grad_check(
        |g, v| {
            let sq = g.mul(v[0], v[0])?;
            Ok(g.sum(sq))
        },
        &[Tensor::vector(vec![1.0f64, 2.0])],
        1e-5,
    )
    .unwrap();
    assert!(report.max_relative_error < 1e-8, "{report:?}");
}

#[test]
fn grad_check_constant_function() {
    let report = grad_check(
        |g, _| Ok(g.constant(Tensor::scalar(3.0))),
        &[Tensor::vector(vec![1.0f64, 2.0])],
        1e-5,
    )
    .unwrap();
    assert_eq!(report.max_relative_error, 0.0);
}

#[test]
fn grad_check_rejects_non_finite_and_bad_epsilon() {
    let p = [Tensor::vector(vec![-1.0f64])];
    let err = grad_check(|g, v| Ok(g.log(v[0])), &p, 1e-5).unwrap_err();
    assert!(matches!(err, NumericsError::NonFinite { .. }));
    assert!(grad_check(|g, v| Ok(g.sum(v[0])), &p, 0.0).is_err());
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions(
        rows in 1usize..5,
        vals in prop::collection::vec(-50.0f32..50.0, 1..40),
    ) {
        let cols = vals.len().div_ceil(rows).max(1);
        let mut data = vals.clone();
        data.resize(rows * cols, 0.0);
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::new(&[rows, cols], data).unwrap());
        let y = g.softmax(x, 1).unwrap();
        for r in 0..rows {
            let row = g.value(y).row(r);
            prop_assert!(row.iter().all(|&p| p >= 0.0));
            let s: f32 = row.iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn normalized_vectors_have_unit_norm(
        vals in prop::collection::vec(-1e3f32..1e3, 2..64),
    ) {
        prop_assume!(vals.iter().any(|v| v.abs() > 1e-3));
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::vector(vals));
        let y = g.l2_normalize(x, 0).unwrap();
        let n: f32 = g.value(y).data().iter().map(|v| v * v).sum::<f32>().sqrt();
        prop_assert!((n - 1.0).abs() < 1e-6);
    }
}
