use super::gradcheck::{central_difference, max_relative_error};
use super::*;
use crate::error::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rand_values(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

/// Build the same loss twice: once for analytic gradients, then re-built
/// per finite-difference probe. Returns the worst relative error over all
/// leaves.
fn check_grads<F>(shapes: &[Vec<usize>], leaves: &[Vec<f64>], build: F, eps: f64) -> f64
where
    F: Fn(&mut Graph, &[TensorId]) -> TensorId,
{
    let mut g = Graph::new();
    let ids: Vec<TensorId> = leaves
        .iter()
        .zip(shapes)
        .map(|(v, s)| {
            g.leaf(
                Tensor::new(s.clone(), v.clone())
                    .unwrap()
                    .with_requires_grad(),
            )
        })
        .collect();
    let loss = build(&mut g, &ids);
    g.backward(loss).unwrap();

    let mut worst: f64 = 0.0;
    for li in 0..leaves.len() {
        let analytic = g.grad(ids[li]).expect("leaf gradient populated").to_vec();
        let f = |x: &[f64]| {
            let mut g2 = Graph::new();
            let ids2: Vec<TensorId> = leaves
                .iter()
                .enumerate()
                .map(|(j, v)| {
                    let vals = if j == li { x.to_vec() } else { v.clone() };
                    g2.leaf(Tensor::new(shapes[j].clone(), vals).unwrap())
                })
                .collect();
            let l = build(&mut g2, &ids2);
            g2.item(l).unwrap()
        };
        let numeric = central_difference(f, &leaves[li], eps);
        worst = worst.max(max_relative_error(&analytic, &numeric));
    }
    worst
}

// ── matmul ─────────────────────────────────────────────────────────────

#[test]
fn matmul_identity() {
    let mut g = Graph::new();
    let i2 = g
        .constant(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0])
        .unwrap();
    let a = g
        .constant(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0])
        .unwrap();
    let c = g.matmul(i2, a).unwrap();
    assert_eq!(g.values(c), &[1.0, 2.0, 3.0, 4.0]);
}

/// Independent scalar triple-loop product.
fn matmul_oracle(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            for p in 0..k {
                c[i * n + j] += a[i * k + p] * b[p * n + j];
            }
        }
    }
    c
}

#[test]
fn matmul_against_triple_loop() {
    let a = vec![1.0, 2.0, 3.0, 4.0];
    let b = vec![0.0, 1.0, 1.0, 0.0];
    assert_eq!(matmul_oracle(&a, &b, 2, 2, 2), vec![2.0, 1.0, 4.0, 3.0]);

    let mut g = Graph::new();
    let ta = g.constant(vec![2, 2], a.clone()).unwrap();
    let tb = g.constant(vec![2, 2], b.clone()).unwrap();
    let c = g.matmul(ta, tb).unwrap();
    assert_eq!(g.values(c), &[2.0, 1.0, 4.0, 3.0]);

    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for (m, k, n) in [(3, 4, 5), (1, 6, 2), (5, 1, 3)] {
        let av = rand_values(&mut rng, m * k);
        let bv = rand_values(&mut rng, k * n);
        let mut g = Graph::new();
        let ta = g.constant(vec![m, k], av.clone()).unwrap();
        let tb = g.constant(vec![k, n], bv.clone()).unwrap();
        let c = g.matmul(ta, tb).unwrap();
        let expect = matmul_oracle(&av, &bv, m, k, n);
        for (got, want) in g.values(c).iter().zip(&expect) {
            assert!((got - want).abs() < 1e-12);
        }
    }
}

#[test]
fn matmul_batched_and_transposed_against_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (b, m, k, n) = (3, 2, 4, 5);
    let av = rand_values(&mut rng, b * m * k);
    let bv = rand_values(&mut rng, b * n * k);
    let shared = rand_values(&mut rng, k * n);

    let mut g = Graph::new();
    let ta = g.constant(vec![b, m, k], av.clone()).unwrap();
    let tb = g.constant(vec![b, n, k], bv.clone()).unwrap();
    let ts = g.constant(vec![k, n], shared.clone()).unwrap();

    let nt = g.matmul_nt(ta, tb).unwrap();
    assert_eq!(g.shape(nt), &[b, m, n]);
    for s in 0..b {
        // transpose slice then triple-loop
        let mut bt = vec![0.0; k * n];
        for i in 0..n {
            for j in 0..k {
                bt[j * n + i] = bv[s * n * k + i * k + j];
            }
        }
        let expect = matmul_oracle(&av[s * m * k..(s + 1) * m * k], &bt, m, k, n);
        for (x, y) in g.values(nt)[s * m * n..(s + 1) * m * n].iter().zip(&expect) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    let nn = g.matmul(ta, ts).unwrap();
    assert_eq!(g.shape(nn), &[b, m, n]);
    for s in 0..b {
        let expect = matmul_oracle(&av[s * m * k..(s + 1) * m * k], &shared, m, k, n);
        for (x, y) in g.values(nn)[s * m * n..(s + 1) * m * n].iter().zip(&expect) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let mut g = Graph::new();
    let a = g.constant(vec![2, 3], vec![0.0; 6]).unwrap();
    let b = g.constant(vec![4, 2], vec![0.0; 8]).unwrap();
    match g.matmul(a, b) {
        Err(Error::Shape { lhs, rhs, .. }) => {
            assert_eq!(lhs, vec![2, 3]);
            assert_eq!(rhs, vec![4, 2]);
        }
        other => panic!("expected shape error, got {other:?}"),
    }
}

#[test]
fn matmul_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let (m, k, n) = (3, 4, 2);
    let shapes = vec![vec![m, k], vec![k, n]];
    let leaves = vec![rand_values(&mut rng, m * k), rand_values(&mut rng, k * n)];
    let err = check_grads(
        &shapes,
        &leaves,
        |g, ids| {
            let c = g.matmul(ids[0], ids[1]).unwrap();
            g.sum(c)
        },
        1e-6,
    );
    assert!(err < 1e-6, "matmul grad rel error {err}");
}

// ── softmax ────────────────────────────────────────────────────────────

#[test]
fn softmax_symmetry_and_formula() {
    let mut g = Graph::new();
    let x = g.constant(vec![1, 2], vec![0.0, 0.0]).unwrap();
    let s = g.softmax_rows(x).unwrap();
    assert_eq!(g.values(s), &[0.5, 0.5]);

    // direct formula oracle: exp(v)/sum(exp)
    let vals = [1.0f64.ln(), 3.0f64.ln()];
    let denom: f64 = vals.iter().map(|v| v.exp()).sum();
    let expect: Vec<f64> = vals.iter().map(|v| v.exp() / denom).collect();
    assert!((expect[0] - 0.25).abs() < 1e-15 && (expect[1] - 0.75).abs() < 1e-15);

    let mut g = Graph::new();
    let x = g.constant(vec![1, 2], vals.to_vec()).unwrap();
    let s = g.softmax_rows(x).unwrap();
    for (got, want) in g.values(s).iter().zip(&expect) {
        assert!((got - want).abs() < 1e-12);
    }
}

#[test]
fn softmax_neg_infinity_sentinel() {
    let mut g = Graph::new();
    let x = g
        .constant(vec![1, 3], vec![0.0, f64::NEG_INFINITY, 1.0])
        .unwrap();
    let s = g.softmax_rows(x).unwrap();
    assert_eq!(g.values(s)[1], 0.0);

    let bad = g
        .constant(vec![1, 2], vec![f64::NEG_INFINITY, f64::NEG_INFINITY])
        .unwrap();
    assert!(matches!(
        g.softmax_rows(bad),
        Err(Error::DegenerateRow { row: 0 })
    ));
}

#[test]
fn softmax_jacobian_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let (m, n) = (3, 5);
    let x = rand_values(&mut rng, m * n);
    // random probe vector tests vᵀJ
    let probe = rand_values(&mut rng, m * n);
    let shapes = vec![vec![m, n]];
    let err = check_grads(
        &shapes,
        &[x],
        |g, ids| {
            let s = g.softmax_rows(ids[0]).unwrap();
            let v = g.constant(vec![m, n], probe.clone()).unwrap();
            let w = g.mul(s, v).unwrap();
            g.sum(w)
        },
        1e-6,
    );
    assert!(err < 1e-6, "softmax grad rel error {err}");
}

// ── layer norm ─────────────────────────────────────────────────────────

#[test]
fn layer_norm_constant_row_is_zero() {
    let mut g = Graph::new();
    let x = g.constant(vec![1, 3], vec![5.0, 5.0, 5.0]).unwrap();
    let gain = g.constant(vec![3], vec![1.0; 3]).unwrap();
    let bias = g.constant(vec![3], vec![0.0; 3]).unwrap();
    let y = g.layer_norm(x, gain, bias, 1e-12).unwrap();
    for v in g.values(y) {
        assert!(v.abs() < 1e-5);
    }
}

#[test]
fn layer_norm_two_point_row() {
    let mut g = Graph::new();
    let x = g.constant(vec![1, 2], vec![1.0, 3.0]).unwrap();
    let gain = g.constant(vec![2], vec![1.0; 2]).unwrap();
    let bias = g.constant(vec![2], vec![0.0; 2]).unwrap();
    let y = g.layer_norm(x, gain, bias, 1e-12).unwrap();
    assert!((g.values(y)[0] + 1.0).abs() < 1e-9);
    assert!((g.values(y)[1] - 1.0).abs() < 1e-9);
}

#[test]
fn layer_norm_standardizes_rows() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (m, n) = (4, 8);
    let xv = rand_values(&mut rng, m * n);
    let mut g = Graph::new();
    let x = g.constant(vec![m, n], xv).unwrap();
    let gain = g.constant(vec![n], vec![1.0; n]).unwrap();
    let bias = g.constant(vec![n], vec![0.0; n]).unwrap();
    let y = g.layer_norm(x, gain, bias, 1e-12).unwrap();
    for r in 0..m {
        let row = &g.values(y)[r * n..(r + 1) * n];
        let mean: f64 = row.iter().sum::<f64>() / n as f64;
        let var: f64 = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        assert!(mean.abs() < 1e-10, "row mean {mean}");
        assert!((var - 1.0).abs() < 1e-6, "population variance {var}");
    }
}

#[test]
fn layer_norm_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let (m, n) = (3, 6);
    let shapes = vec![vec![m, n], vec![n], vec![n]];
    let leaves = vec![
        rand_values(&mut rng, m * n),
        rand_values(&mut rng, n),
        rand_values(&mut rng, n),
    ];
    let probe = rand_values(&mut rng, m * n);
    let err = check_grads(
        &shapes,
        &leaves,
        |g, ids| {
            let y = g.layer_norm(ids[0], ids[1], ids[2], 1e-8).unwrap();
            let v = g.constant(vec![m, n], probe.clone()).unwrap();
            let w = g.mul(y, v).unwrap();
            g.sum(w)
        },
        1e-6,
    );
    assert!(err < 1e-5, "layer_norm grad rel error {err}");
}

// ── gelu ───────────────────────────────────────────────────────────────

#[test]
fn gelu_zero_and_asymptote() {
    let mut g = Graph::new();
    let x = g
        .constant(vec![1, 4], vec![0.0, 6.0, 8.0, 12.0])
        .unwrap();
    let y = g.gelu(x);
    let out = g.values(y);
    assert_eq!(out[0], 0.0);
    for (v, x) in out[1..].iter().zip([6.0, 8.0, 12.0]) {
        assert!((v - x).abs() < 1e-6, "gelu({x}) = {v}");
    }
}

#[test]
fn gelu_gradient_matches_finite_differences() {
    let points = vec![-2.0, -0.5, 0.5, 2.0];
    let err = check_grads(
        &[vec![1, 4]],
        &[points],
        |g, ids| {
            let y = g.gelu(ids[0]);
            g.sum(y)
        },
        1e-6,
    );
    assert!(err < 1e-5, "gelu grad rel error {err}");
}

// ── embedding lookup ───────────────────────────────────────────────────

#[test]
fn embedding_lookup_basics() {
    let mut g = Graph::new();
    let table = g
        .constant(vec![4, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0])
        .unwrap();
    let out = g.embedding_lookup(table, &[0]).unwrap();
    assert_eq!(g.values(out), &[1.0, 2.0]);

    match g.embedding_lookup(table, &[9]) {
        Err(Error::Index { id, limit, .. }) => {
            assert_eq!(id, 9);
            assert_eq!(limit, 4);
        }
        other => panic!("expected index error, got {other:?}"),
    }
}

#[test]
fn embedding_repeated_id_accumulates() {
    let mut g = Graph::new();
    let table = g.leaf(
        Tensor::new(vec![4, 2], vec![0.5; 8])
            .unwrap()
            .with_requires_grad(),
    );
    let rows = g.embedding_lookup(table, &[3, 3]).unwrap();
    // weights g1 = (1,2), g2 = (10, 20) via elementwise product then sum
    let w = g
        .constant(vec![2, 2], vec![1.0, 2.0, 10.0, 20.0])
        .unwrap();
    let prod = g.mul(rows, w).unwrap();
    let loss = g.sum(prod);
    g.backward(loss).unwrap();
    let grad = g.grad(table).unwrap();
    assert_eq!(&grad[6..8], &[11.0, 22.0]);
    assert_eq!(&grad[0..6], &[0.0; 6]);
}

#[test]
fn embedding_matches_one_hot_matmul_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let (vocab, d) = (6, 3);
    let table_v = rand_values(&mut rng, vocab * d);
    let ids = [2usize, 0, 5, 2];

    // oracle: one-hot matrix times table, forward and backward
    let mut one_hot = vec![0.0; ids.len() * vocab];
    for (r, &id) in ids.iter().enumerate() {
        one_hot[r * vocab + id] = 1.0;
    }

    let mut g = Graph::new();
    let table = g.leaf(
        Tensor::new(vec![vocab, d], table_v.clone())
            .unwrap()
            .with_requires_grad(),
    );
    let gathered = g.embedding_lookup(table, &ids).unwrap();
    let loss = g.sum(gathered);
    g.backward(loss).unwrap();
    let gathered_vals = g.values(gathered).to_vec();
    let grad = g.grad(table).unwrap().to_vec();

    let mut g2 = Graph::new();
    let oh = g2
        .constant(vec![ids.len(), vocab], one_hot)
        .unwrap();
    let table2 = g2.leaf(
        Tensor::new(vec![vocab, d], table_v)
            .unwrap()
            .with_requires_grad(),
    );
    let dense = g2.matmul(oh, table2).unwrap();
    let loss2 = g2.sum(dense);
    g2.backward(loss2).unwrap();

    assert_eq!(gathered_vals, g2.values(dense));
    assert_eq!(grad, g2.grad(table2).unwrap());
}

// ── mse ────────────────────────────────────────────────────────────────

#[test]
fn mse_examples() {
    let mut g = Graph::new();
    let x = g
        .constant(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0])
        .unwrap();
    let y = g
        .constant(vec![2, 2], vec![1.0, 2.0, 3.0, 2.0])
        .unwrap();
    let same = g.mse(x, x).unwrap();
    assert_eq!(g.item(same).unwrap(), 0.0);

    // scalar-loop oracle: (0 + 0 + 0 + 4) / 4
    let loss = g.mse(x, y).unwrap();
    assert_eq!(g.item(loss).unwrap(), 1.0);

    let sym = g.mse(y, x).unwrap();
    assert_eq!(g.item(sym).unwrap(), g.item(loss).unwrap());
}

#[test]
fn mse_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let target = rand_values(&mut rng, 6);
    let leaves = vec![rand_values(&mut rng, 6)];
    let err = check_grads(
        &[vec![2, 3]],
        &leaves,
        |g, ids| {
            let y = g.constant(vec![2, 3], target.clone()).unwrap();
            g.mse(ids[0], y).unwrap()
        },
        1e-6,
    );
    assert!(err < 1e-7, "mse grad rel error {err}");
}

// ── cross entropy ──────────────────────────────────────────────────────

#[test]
fn cross_entropy_uniform_and_saturated() {
    let mut g = Graph::new();
    let logits = g.constant(vec![2, 3], vec![0.0; 6]).unwrap();
    let loss = g.cross_entropy(logits, &[0, 2]).unwrap();
    assert!((g.item(loss).unwrap() - 3.0f64.ln()).abs() < 1e-12);

    let mut g = Graph::new();
    let hot = g
        .constant(vec![1, 3], vec![30.0, 0.0, 0.0])
        .unwrap();
    let loss = g.cross_entropy(hot, &[0]).unwrap();
    assert!(g.item(loss).unwrap().abs() < 1e-9);
}

#[test]
fn cross_entropy_ignore_and_errors() {
    let mut g = Graph::new();
    let logits = g.constant(vec![2, 3], vec![0.0; 6]).unwrap();
    let loss = g.cross_entropy(logits, &[IGNORE_LABEL, 1]).unwrap();
    assert!((g.item(loss).unwrap() - 3.0f64.ln()).abs() < 1e-12);

    assert!(matches!(
        g.cross_entropy(logits, &[IGNORE_LABEL, IGNORE_LABEL]),
        Err(Error::Data(_))
    ));
    assert!(matches!(
        g.cross_entropy(logits, &[0, 7]),
        Err(Error::Index { .. })
    ));
}

#[test]
fn cross_entropy_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let leaves = vec![rand_values(&mut rng, 4 * 3)];
    let labels = vec![2, IGNORE_LABEL, 0, 1];
    let err = check_grads(
        &[vec![4, 3]],
        &leaves,
        |g, ids| g.cross_entropy(ids[0], &labels).unwrap(),
        1e-6,
    );
    assert!(err < 1e-6, "cross_entropy grad rel error {err}");
}

// ── dropout ────────────────────────────────────────────────────────────

#[test]
fn dropout_identity_paths() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut g = Graph::new();
    let x = g.constant(vec![2, 3], vec![1.0; 6]).unwrap();
    let inference = g.dropout(x, 0.5, &mut rng, false).unwrap();
    assert_eq!(inference, x);
    let zero_rate = g.dropout(x, 0.0, &mut rng, true).unwrap();
    assert_eq!(zero_rate, x);
    assert!(matches!(
        g.dropout(x, 1.0, &mut rng, true),
        Err(Error::Config(_))
    ));
}

#[test]
fn dropout_monte_carlo_fraction() {
    let n = 100_000;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut g = Graph::new();
    let x = g.constant(vec![n, 1], vec![1.0; n]).unwrap();
    let y = g.dropout(x, 0.5, &mut rng, true).unwrap();
    let dropped = g.values(y).iter().filter(|v| **v == 0.0).count();
    let fraction = dropped as f64 / n as f64;
    assert!(
        (fraction - 0.5).abs() <= 0.01,
        "drop fraction {fraction} out of tolerance"
    );
    // survivors scaled by 1/(1-rate)
    for v in g.values(y) {
        assert!(*v == 0.0 || (*v - 2.0).abs() < 1e-15);
    }
}

// ── backward bookkeeping ───────────────────────────────────────────────

#[test]
fn backward_sum_gives_ones() {
    let mut g = Graph::new();
    let x = g.leaf(
        Tensor::new(vec![2, 3], vec![1.0, -1.0, 2.0, 0.5, 3.0, -2.0])
            .unwrap()
            .with_requires_grad(),
    );
    let loss = g.sum(x);
    g.backward(loss).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[1.0; 6]);
}

#[test]
fn backward_composite_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let (m, k, n) = (2, 3, 2);
    let target = rand_values(&mut rng, m * n);
    let shapes = vec![vec![m, k], vec![k, n]];
    let leaves = vec![rand_values(&mut rng, m * k), rand_values(&mut rng, k * n)];
    let err = check_grads(
        &shapes,
        &leaves,
        |g, ids| {
            let c = g.matmul(ids[0], ids[1]).unwrap();
            let t = g.constant(vec![m, n], target.clone()).unwrap();
            g.mse(c, t).unwrap()
        },
        1e-6,
    );
    assert!(err < 1e-5, "composite grad rel error {err}");
}

#[test]
fn backward_state_rules() {
    let mut g = Graph::new();
    let x = g.leaf(
        Tensor::new(vec![2], vec![1.0, 2.0])
            .unwrap()
            .with_requires_grad(),
    );
    let frozen = g.leaf(Tensor::new(vec![2], vec![5.0, 6.0]).unwrap());
    let s = g.add(x, frozen).unwrap();
    assert!(matches!(g.backward(s), Err(Error::Shape { .. })));

    let loss = g.sum(s);
    g.backward(loss).unwrap();
    assert!(g.grad(x).is_some());
    assert!(g.grad(frozen).is_none(), "requires_grad=false gets no grad");

    assert!(matches!(g.backward(loss), Err(Error::State(_))));
    g.reset_gradients();
    g.backward(loss).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[1.0, 1.0]);
}

#[test]
fn gather_and_reshape_roundtrip_gradients() {
    // transpose a 2x3 via gather, then straight reshape back
    let mut g = Graph::new();
    let x = g.leaf(
        Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0])
            .unwrap()
            .with_requires_grad(),
    );
    let mut index = Vec::new();
    for j in 0..3 {
        for i in 0..2 {
            index.push(i * 3 + j);
        }
    }
    let t = g.gather(x, index, vec![3, 2]).unwrap();
    assert_eq!(g.values(t), &[1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
    let flat = g.reshape(t, vec![6]).unwrap();
    let w = g
        .constant(vec![6], vec![1.0, 10.0, 2.0, 20.0, 3.0, 30.0])
        .unwrap();
    let prod = g.mul(flat, w).unwrap();
    let loss = g.sum(prod);
    g.backward(loss).unwrap();
    // weight that landed on each transposed position flows back
    assert_eq!(g.grad(x).unwrap(), &[1.0, 2.0, 3.0, 10.0, 20.0, 30.0]);
}

// ── cross-op invariants ────────────────────────────────────────────────

#[test]
fn finite_difference_consistency_across_shapes() {
    // Every differentiable op at three shapes each, worst error < 1e-4.
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for (m, n) in [(2, 3), (1, 7), (4, 4)] {
        let x = rand_values(&mut rng, m * n);
        let gain = rand_values(&mut rng, n);
        let bias = rand_values(&mut rng, n);
        let probe = rand_values(&mut rng, m * n);
        let shapes = vec![vec![m, n], vec![n], vec![n]];
        let leaves = vec![x, gain, bias];
        let err = check_grads(
            &shapes,
            &leaves,
            |g, ids| {
                let ln = g.layer_norm(ids[0], ids[1], ids[2], 1e-8).unwrap();
                let sm = g.softmax_rows(ln).unwrap();
                let ge = g.gelu(sm);
                let th = g.tanh(ge);
                let v = g.constant(vec![m, n], probe.clone()).unwrap();
                let w = g.mul(th, v).unwrap();
                g.sum(w)
            },
            1e-6,
        );
        assert!(err < 1e-4, "chained op grad rel error {err} at {m}x{n}");
    }
}

#[test]
fn determinism_same_seed_same_everything() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let vals = rand_values(&mut rng, 12);
        let mut g = Graph::new();
        let x = g.leaf(
            Tensor::new(vec![3, 4], vals)
                .unwrap()
                .with_requires_grad(),
        );
        let d = g.dropout(x, 0.3, &mut rng, true).unwrap();
        let s = g.softmax_rows(d).unwrap();
        let loss = g.sum(s);
        g.backward(loss).unwrap();
        (g.values(s).to_vec(), g.grad(x).unwrap().to_vec())
    };
    let (v1, g1) = run();
    let (v2, g2) = run();
    assert_eq!(v1, v2);
    assert_eq!(g1, g2);
}

mod properties {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn softmax_rows_are_distributions(
            rows in 1usize..5,
            cols in 1usize..6,
            seed in any::<u64>(),
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let vals: Vec<f64> = (0..rows * cols).map(|_| rng.gen_range(-20.0..20.0)).collect();
            let mut g = Graph::new();
            let x = g.constant(vec![rows, cols], vals).unwrap();
            let s = g.softmax_rows(x).unwrap();
            for r in 0..rows {
                let row = &g.values(s)[r * cols..(r + 1) * cols];
                let sum: f64 = row.iter().sum();
                prop_assert!((sum - 1.0).abs() < 1e-12);
                for v in row {
                    prop_assert!((0.0..=1.0).contains(v));
                }
            }
        }

        #[test]
        fn mse_zero_iff_equal_and_symmetric(
            n in 1usize..20,
            seed in any::<u64>(),
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a: Vec<f64> = (0..n).map(|_| rng.gen_range(-5.0..5.0)).collect();
            let b: Vec<f64> = (0..n).map(|_| rng.gen_range(-5.0..5.0)).collect();
            let mut g = Graph::new();
            let ta = g.constant(vec![n], a.clone()).unwrap();
            let tb = g.constant(vec![n], b.clone()).unwrap();
            let self_loss = g.mse(ta, ta).unwrap();
            prop_assert_eq!(g.item(self_loss).unwrap(), 0.0);
            let ab = g.mse(ta, tb).unwrap();
            let ba = g.mse(tb, ta).unwrap();
            prop_assert_eq!(g.item(ab).unwrap(), g.item(ba).unwrap());
        }
    }
}
