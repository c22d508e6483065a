use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    let data = (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Matrix::from_vec(rows, cols, data).unwrap()
}

/// Reduces any node to a scalar through an MSE against a fixed target, so
/// the upstream gradient is not uniform.
fn reduce<'a>(g: &mut Graph<'a>, x: NodeId, seed: u64) -> Result<NodeId> {
    let (r, c) = g.value(x).shape();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcdef);
    let target = g.constant(random(&mut rng, r, c));
    g.mean_squared_error(x, target)
}

fn check_points<F>(name: &str, shapes: &[(usize, usize)], build: F)
where
    F: Fn(&mut Graph<'_>, &[NodeId]) -> Result<NodeId>,
{
    for seed in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let point: Vec<Matrix> = shapes.iter().map(|&(r, c)| random(&mut rng, r, c)).collect();
        let report = grad_check(&build, &point, 1e-6).unwrap();
        assert!(
            report.max_relative_error < 1e-5,
            "{name} seed {seed}: {report:?}"
        );
    }
}

#[test]
fn forward_examples() {
    let mut g = Graph::new();
    let a = g.constant(Matrix::filled(2, 3, 1.0));
    let b = g.constant(Matrix::filled(3, 2, 1.0));
    let c = g.matmul(a, b).unwrap();
    assert_eq!(g.value(c), &Matrix::filled(2, 2, 3.0));

    let z = g.constant(Matrix::zeros(1, 2));
    let p = g.row_softmax(z);
    assert_eq!(g.value(p).as_slice(), &[0.5, 0.5]);

    let x = g.constant(Matrix::filled(1, 4, 2.5));
    let gain = g.constant(Matrix::filled(1, 4, 3.0));
    let bias = g.constant(Matrix::row_vector(&[0.1, 0.2, 0.3, 0.4]));
    let y = g.layer_norm(x, gain, bias).unwrap();
    assert_eq!(g.value(y).as_slice(), &[0.1, 0.2, 0.3, 0.4]);
}

#[test]
fn shape_mismatch_names_the_op() {
    let mut g = Graph::new();
    let a = g.constant(Matrix::zeros(2, 3));
    let b = g.constant(Matrix::zeros(2, 3));
    match g.matmul(a, b) {
        Err(Error::ShapeMismatch { op, shapes }) => {
            assert_eq!(op, "matmul");
            assert_eq!(shapes, "2x3, 2x3");
        }
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn backward_rejects_non_scalar() {
    let mut g = Graph::new();
    let a = g.leaf(Matrix::zeros(2, 2), true);
    assert!(matches!(
        g.backward(a),
        Err(Error::NonScalarLoss { rows: 2, cols: 2 })
    ));
}

#[test]
fn linear_sum_gradient_is_ones_times_x() {
    let w = Matrix::from_rows(&[[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]]).unwrap();
    let x = Matrix::from_rows(&[[0.5], [-2.0]]).unwrap();
    let mut g = Graph::new();
    let wn = g.param(&w);
    let xn = g.constant_ref(&x);
    let y = g.matmul(wn, xn).unwrap();
    let loss = g.sum(y);
    g.backward(loss).unwrap();
    let grad = g.grad(wn).unwrap();
    for r in 0..3 {
        assert_eq!(grad.row(r), &[0.5, -2.0]);
    }
    assert!(g.grad(xn).is_none());
}

#[test]
fn mse_of_identical_inputs_has_zero_gradient() {
    let a = Matrix::from_rows(&[[1.0, -1.0], [0.25, 3.0]]).unwrap();
    let mut g = Graph::new();
    let x = g.param(&a);
    let y = g.param(&a);
    let loss = g.mean_squared_error(x, y).unwrap();
    g.backward(loss).unwrap();
    assert_eq!(g.value(loss).item(), 0.0);
    assert_eq!(g.grad(x).unwrap().max_abs(), 0.0);
    assert_eq!(g.grad(y).unwrap().max_abs(), 0.0);
}

#[test]
fn repeated_backward_accumulates_until_reset() {
    let w = Matrix::filled(1, 3, 2.0);
    let mut g = Graph::new();
    let wn = g.param(&w);
    let loss = g.sum(wn);
    g.backward(loss).unwrap();
    g.backward(loss).unwrap();
    assert_eq!(g.grad(wn).unwrap().as_slice(), &[2.0, 2.0, 2.0]);
    g.zero_grad();
    g.backward(loss).unwrap();
    assert_eq!(g.grad(wn).unwrap().as_slice(), &[1.0, 1.0, 1.0]);
}

#[test]
fn softmax_rows_sum_to_one_and_layer_norm_centres() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let m = random(&mut rng, 6, 9).scaled(20.0);
    let mut g = Graph::new();
    let x = g.constant(m);
    let p = g.row_softmax(x);
    for r in 0..6 {
        let s: f64 = g.value(p).row(r).iter().sum();
        assert!((s - 1.0).abs() < 1e-12);
    }
    let gain = g.constant(Matrix::filled(1, 9, 1.0));
    let bias = g.constant(Matrix::zeros(1, 9));
    let y = g.layer_norm(x, gain, bias).unwrap();
    for r in 0..6 {
        let mean: f64 = g.value(y).row(r).iter().sum::<f64>() / 9.0;
        assert!(mean.abs() < 1e-10);
    }
}

#[test]
fn grad_scale_multiplies_only_the_backward_pass() {
    let w = Matrix::row_vector(&[1.0, 2.0]);
    let mut g = Graph::new();
    let wn = g.param(&w);
    let s = g.grad_scale(wn, 0.25);
    assert_eq!(g.value(s), &w);
    let loss = g.sum(s);
    g.backward(loss).unwrap();
    assert_eq!(g.grad(wn).unwrap().as_slice(), &[0.25, 0.25]);
}

#[test]
fn gradient_exactness_per_primitive() {
    check_points("matmul", &[(3, 4), (4, 2)], |g, l| {
        let y = g.matmul(l[0], l[1])?;
        reduce(g, y, 1)
    });
    check_points("add", &[(3, 4), (3, 4)], |g, l| {
        let y = g.add(l[0], l[1])?;
        reduce(g, y, 2)
    });
    check_points("add-broadcast", &[(3, 4), (1, 4)], |g, l| {
        let y = g.add(l[0], l[1])?;
        reduce(g, y, 3)
    });
    check_points("scale", &[(2, 5)], |g, l| {
        let y = g.scale(l[0], -1.7);
        reduce(g, y, 4)
    });
    check_points("transpose", &[(2, 5)], |g, l| {
        let y = g.transpose(l[0]);
        reduce(g, y, 5)
    });
    check_points("row-softmax", &[(3, 5)], |g, l| {
        let y = g.row_softmax(l[0]);
        reduce(g, y, 6)
    });
    check_points("layer-norm", &[(3, 6), (1, 6), (1, 6)], |g, l| {
        let y = g.layer_norm(l[0], l[1], l[2])?;
        reduce(g, y, 7)
    });
    check_points("gelu", &[(4, 4)], |g, l| {
        let y = g.gelu(l[0]);
        reduce(g, y, 8)
    });
    check_points("embedding-lookup", &[(5, 3)], |g, l| {
        let y = g.embedding_lookup(l[0], &[4, 0, 4, 2])?;
        reduce(g, y, 9)
    });
    check_points("gather-first-token", &[(6, 3)], |g, l| {
        let y = g.gather_first_token(l[0], 3)?;
        reduce(g, y, 10)
    });
    check_points("mean-squared-error", &[(3, 3), (3, 3)], |g, l| {
        g.mean_squared_error(l[0], l[1])
    });
    check_points("sum", &[(3, 3)], |g, l| {
        let y = g.gelu(l[0]);
        Ok(g.sum(y))
    });
    check_points("concat-rows", &[(2, 3), (1, 3)], |g, l| {
        let y = g.concat_rows(&[l[0], l[1]])?;
        reduce(g, y, 11)
    });
    check_points("concat-cols", &[(2, 3), (2, 1)], |g, l| {
        let y = g.concat_cols(&[l[0], l[1]])?;
        reduce(g, y, 12)
    });
    check_points("slice", &[(4, 5)], |g, l| {
        let y = g.slice(l[0], 1, 2, 2, 3)?;
        reduce(g, y, 13)
    });
    check_points("mask-columns", &[(3, 4)], |g, l| {
        let y = g.mask_columns(l[0], &[true, false, true, true])?;
        let p = g.row_softmax(y);
        reduce(g, p, 14)
    });
}

#[test]
fn soft_cross_entropy_gradients() {
    for seed in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let logits = random(&mut rng, 4, 3).scaled(3.0);
        let mut targets = random(&mut rng, 4, 3).map(f64::exp);
        for r in 0..4 {
            let s: f64 = targets.row(r).iter().sum();
            targets.row_mut(r).iter_mut().for_each(|t| *t /= s);
        }
        let report = grad_check(
            |g, l| g.soft_cross_entropy(l[0], targets.clone()),
            &[logits],
            1e-6,
        )
        .unwrap();
        assert!(report.max_relative_error < 1e-6, "{report:?}");
    }
}

#[test]
fn relu_gradient_away_from_the_kink() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..10 {
        // Keep every entry at least 0.1 away from zero.
        let m = random(&mut rng, 3, 4).map(|v| if v.abs() < 0.1 { v + 0.3 } else { v });
        let report = grad_check(
            |g, l| {
                let y = g.relu(l[0]);
                reduce(g, y, 15)
            },
            &[m],
            1e-6,
        )
        .unwrap();
        assert!(report.max_relative_error < 1e-5);
    }
}

#[test]
fn single_matmul_grad_check_is_tight() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let point = vec![random(&mut rng, 3, 3), random(&mut rng, 3, 2)];
    let report = grad_check(
        |g, l| {
            let y = g.matmul(l[0], l[1])?;
            Ok(g.sum(y))
        },
        &point,
        1e-6,
    )
    .unwrap();
    assert!(report.max_relative_error < 1e-7, "{report:?}");
}

#[test]
fn random_five_op_graph_matches_finite_differences() {
    for seed in 0..5u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 40);
        let point = vec![random(&mut rng, 3, 4), random(&mut rng, 4, 4), random(&mut rng, 1, 4)];
        let report = grad_check(
            |g, l| {
                let h = g.matmul(l[0], l[1])?;
                let h = g.add(h, l[2])?;
                let h = g.gelu(h);
                let h = g.row_softmax(h);
                let t = g.transpose(h);
                let m = g.matmul(h, t)?;
                Ok(g.sum(m))
            },
            &point,
            1e-6,
        )
        .unwrap();
        assert!(report.max_relative_error < 1e-5, "{report:?}");
    }
}

#[test]
fn grad_check_reports_non_finite_node() {
    let point = vec![Matrix::filled(1, 2, 1e200)];
    let err = grad_check(
        |g, l| {
            let t = g.transpose(l[0]);
            let m = g.matmul(l[0], t)?;
            Ok(g.sum(m))
        },
        &point,
        1e-6,
    )
    .unwrap_err();
    assert!(matches!(err, Error::NonFinite { node: 2, op: "matmul" }), "{err:?}");
    assert!(grad_check(|g, l| Ok(g.sum(l[0])), &point, 0.0).is_err());
}

#[test]
fn forward_is_deterministic() {
    let build = |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random(&mut rng, 5, 7);
        let b = random(&mut rng, 7, 3);
        let mut g = Graph::new();
        let (x, y) = (g.constant(a), g.constant(b));
        let z = g.matmul(x, y).unwrap();
        let p = g.row_softmax(z);
        g.value(p).clone()
    };
    assert_eq!(build(5).as_slice(), build(5).as_slice());
}

#[test]
fn topology_dump_lists_every_node() {
    let mut g = Graph::new();
    let a = g.leaf(Matrix::zeros(2, 2), true);
    let b = g.transpose(a);
    let _ = g.sum(b);
    let dump = g.dump_topology();
    assert!(dump.starts_with("# graph nodes=3"));
    assert!(dump.contains("1\ttranspose\t2x2\tparents=[0]\trequires_grad=true"));
    assert!(dump.contains("2\tsum\t1x1\tparents=[1]"));
}
