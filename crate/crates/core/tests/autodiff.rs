use disc::tensor::{compare_gradients, grad_check, Graph, OpKind, Tensor, TensorError, Var};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-5;

/// Reduces any output to a scalar through a fixed random weighting so every
/// output entry contributes a distinct gradient.
fn weighted_mean(g: &mut Graph, y: Var, seed: u64) -> Result<Var, TensorError> {
    let (r, c) = g.shape(y);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
    let w = g.constant(Tensor::randn(r, c, 1.0, &mut rng));
    let m = g.mul(y, w)?;
    g.mean(m)
}

fn rand_t(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
    Tensor::randn(r, c, 1.0, rng)
}

/// Values bounded away from the relu kink.
fn away_from_zero(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
    let mut t = rand_t(rng, r, c);
    for v in t.data_mut() {
        if v.abs() < 0.05 {
            *v += 0.1_f64.copysign(*v);
        }
    }
    t
}

fn check<F>(name: &str, f: F, inputs: Vec<Tensor>, seed: u64)
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var, TensorError>,
{
    let rep = grad_check(|g, v| f(g, v).and_then(|y| weighted_mean(g, y, seed)), &inputs, H).unwrap();
    assert!(rep.max_rel_error < 1e-6, "{name}: max rel error {} at {:?}", rep.max_rel_error, rep.worst);
}

#[test]
fn every_op_passes_grad_check_on_twenty_shapes() {
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let r = rng.random_range(1..6);
        let c = rng.random_range(1..6);
        let k = rng.random_range(1..6);
        check("matmul", |g, v| g.matmul(v[0], v[1]), vec![rand_t(&mut rng, r, k), rand_t(&mut rng, k, c)], seed);
        check("transpose", |g, v| g.transpose(v[0]), vec![rand_t(&mut rng, r, c)], seed);
        check("add", |g, v| g.add(v[0], v[1]), vec![rand_t(&mut rng, r, c), rand_t(&mut rng, r, c)], seed);
        check("add_row", |g, v| g.add(v[0], v[1]), vec![rand_t(&mut rng, r, c), rand_t(&mut rng, 1, c)], seed);
        check("mul", |g, v| g.mul(v[0], v[1]), vec![rand_t(&mut rng, r, c), rand_t(&mut rng, r, c)], seed);
        check("scale", |g, v| g.scale(v[0], -1.7), vec![rand_t(&mut rng, r, c)], seed);
        check("relu", |g, v| g.relu(v[0]), vec![away_from_zero(&mut rng, r, c)], seed);
        check("tanh", |g, v| g.tanh(v[0]), vec![rand_t(&mut rng, r, c)], seed);
        check("softmax", |g, v| g.softmax(v[0]), vec![rand_t(&mut rng, r, c)], seed);
        let c2 = c.max(2);
        check(
            "layer_norm",
            |g, v| g.layer_norm(v[0], v[1], v[2]),
            vec![rand_t(&mut rng, r, c2), rand_t(&mut rng, 1, c2), rand_t(&mut rng, 1, c2)],
            seed,
        );
        check(
            "concat_rows",
            |g, v| g.concat_rows(&[v[0], v[1]]),
            vec![rand_t(&mut rng, r, c), rand_t(&mut rng, k, c)],
            seed,
        );
        check(
            "concat_cols",
            |g, v| g.concat_cols(&[v[0], v[1]]),
            vec![rand_t(&mut rng, r, c), rand_t(&mut rng, r, k)],
            seed,
        );
        let (r0, c0) = (rng.random_range(0..r), rng.random_range(0..c));
        check("slice", move |g, v| g.slice(v[0], r0..r, c0..c), vec![rand_t(&mut rng, r, c)], seed);
        check("reshape", move |g, v| g.reshape(v[0], c, r), vec![rand_t(&mut rng, r, c)], seed);
        check("mean", |g, v| g.mean(v[0]), vec![rand_t(&mut rng, r, c)], seed);
        check("mse", |g, v| g.mse(v[0], v[1]), vec![rand_t(&mut rng, r, c), rand_t(&mut rng, r, c)], seed);
        check(
            "linear",
            |g, v| g.linear(v[0], v[1], v[2]),
            vec![rand_t(&mut rng, r, k), rand_t(&mut rng, k, c), rand_t(&mut rng, 1, c)],
            seed,
        );
        let heads = rng.random_range(1..4);
        let d = heads * rng.random_range(1..4);
        check(
            "attention",
            move |g, v| g.attention(v[0], v[1], v[2], heads),
            vec![rand_t(&mut rng, r, d), rand_t(&mut rng, k, d), rand_t(&mut rng, k, d)],
            seed,
        );
    }
}

/// Attention spelled out with slices, softmax and matmuls.
fn composed_attention(g: &mut Graph, q: Var, k: Var, v: Var, heads: usize) -> Result<Var, TensorError> {
    let (nq, d) = g.shape(q);
    let nk = g.shape(k).0;
    let dh = d / heads;
    let mut outs = Vec::new();
    for h in 0..heads {
        let qh = g.slice(q, 0..nq, h * dh..(h + 1) * dh)?;
        let kh = g.slice(k, 0..nk, h * dh..(h + 1) * dh)?;
        let vh = g.slice(v, 0..nk, h * dh..(h + 1) * dh)?;
        let kt = g.transpose(kh)?;
        let s = g.matmul(qh, kt)?;
        let s = g.scale(s, 1.0 / (dh as f64).sqrt())?;
        let p = g.softmax(s)?;
        outs.push(g.matmul(p, vh)?);
    }
    g.concat_cols(&outs)
}

#[test]
fn fused_attention_matches_composition() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let (q, k, v) = (rand_t(&mut rng, 5, 8), rand_t(&mut rng, 3, 8), rand_t(&mut rng, 3, 8));
    let mut g = Graph::new();
    let vars: Vec<Var> = [q, k, v].into_iter().map(|t| g.param(t)).collect();
    let fused = g.attention(vars[0], vars[1], vars[2], 4).unwrap();
    let comp = composed_attention(&mut g, vars[0], vars[1], vars[2], 4).unwrap();
    let gap = g.value(fused).data().iter().zip(g.value(comp).data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(gap < 1e-12, "{gap}");

    let lf = weighted_mean(&mut g, fused, 3).unwrap();
    let lc = weighted_mean(&mut g, comp, 3).unwrap();
    let gf = g.backward(lf).unwrap();
    let gc = g.backward(lc).unwrap();
    for x in &vars {
        let a = gf.get(*x).unwrap();
        let b = gc.get(*x).unwrap();
        let gap = a.data().iter().zip(b.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(gap < 1e-12, "{gap}");
    }
}

#[test]
fn linear_matches_matmul_plus_bias() {
    let mut rng = ChaCha8Rng::seed_from_u64(18);
    let mut g = Graph::new();
    let x = g.constant(rand_t(&mut rng, 4, 3));
    let w = g.constant(rand_t(&mut rng, 3, 2));
    let b = g.constant(rand_t(&mut rng, 1, 2));
    let y = g.linear(x, w, b).unwrap();
    let m = g.matmul(x, w).unwrap();
    let z = g.add(m, b).unwrap();
    let gap = g.value(y).data().iter().zip(g.value(z).data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(gap < 1e-14, "{gap}");
}

#[test]
fn large_matmul_agrees_with_small_path() {
    // 40^3 multiply-adds goes through the blocked kernel
    let mut rng = ChaCha8Rng::seed_from_u64(19);
    let a = rand_t(&mut rng, 40, 40);
    let b = rand_t(&mut rng, 40, 40);
    let c = disc::tensor::matmul(&a, &b).unwrap();
    for (i, j) in [(0, 0), (13, 27), (39, 39)] {
        let naive: f64 = (0..40).map(|p| a.get(i, p) * b.get(p, j)).sum();
        assert!((c.get(i, j) - naive).abs() < 1e-12);
    }
}

#[test]
fn matmul_grad_matches_finite_differences_three_by_four_by_two() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let a = rand_t(&mut rng, 3, 4);
    let b = rand_t(&mut rng, 4, 2);
    let rep = grad_check(
        |g, v| {
            let y = g.matmul(v[0], v[1])?;
            weighted_mean(g, y, 1)
        },
        &[a, b],
        H,
    )
    .unwrap();
    assert_eq!(rep.checked, 12 + 8);
    assert!(rep.max_rel_error < 1e-6, "{}", rep.max_rel_error);
}

#[test]
fn op_examples() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::from_vec(2, 3, vec![1., 2., 3., 4., 5., 6.]).unwrap());
    let i = g.constant(Tensor::identity(2));
    let y = g.matmul(i, a).unwrap();
    assert_eq!(g.value(y), g.value(a));

    let x = g.constant(Tensor::from_vec(1, 2, vec![-1.0, 2.0]).unwrap());
    let r = g.relu(x).unwrap();
    assert_eq!(g.value(r).data(), &[0.0, 2.0]);

    let s = g.constant(Tensor::from_vec(1, 2, vec![0.0, 3f64.ln()]).unwrap());
    let p = g.softmax(s).unwrap();
    assert!((g.value(p).get(0, 0) - 0.25).abs() < 1e-15);
    assert!((g.value(p).get(0, 1) - 0.75).abs() < 1e-15);
}

#[test]
fn square_gradient_is_two_x() {
    let mut g = Graph::new();
    let x = g.param(Tensor::scalar(3.0));
    let xx = g.mul(x, x).unwrap();
    let l = g.mean(xx).unwrap();
    let grads = g.backward(l).unwrap();
    assert_eq!(grads.get(x).unwrap().item(), 6.0);
}

#[test]
fn generic_apply_and_errors() {
    let mut g = Graph::new();
    let a = g.param(Tensor::zeros(2, 3));
    let b = g.param(Tensor::zeros(2, 3));
    match g.apply(OpKind::MatMul, &[a, b]) {
        Err(TensorError::Shape { op, detail }) => {
            assert_eq!(op, "matmul");
            assert!(detail.contains("(2, 3)"));
        }
        other => panic!("expected shape error, got {other:?}"),
    }
    assert!(matches!(g.apply(OpKind::Relu, &[a, b]), Err(TensorError::Arity { .. })));
    assert!(matches!("conv2d".parse::<OpKind>(), Err(TensorError::Unsupported(_))));
    assert_eq!("softmax".parse::<OpKind>().unwrap(), OpKind::Softmax);
    // non-broadcastable add: only 1 x cols rows broadcast
    let col = g.param(Tensor::zeros(2, 1));
    assert!(g.add(a, col).is_err());
    assert!(matches!(g.backward(a), Err(TensorError::NonScalarLoss((2, 3)))));
}

#[test]
fn finite_check_flags_nan() {
    let mut g = Graph::new().with_finite_check(true);
    let x = g.constant(Tensor::scalar(f64::NAN));
    assert!(matches!(g.tanh(x), Err(TensorError::NonFinite("tanh"))));
}

#[test]
fn fan_out_gradient_is_sum_of_branches() {
    // f(x) = mean(tanh(x) * x): x feeds two branches. Compare with the
    // duplicated-input function f(x1, x2) at x1 = x2 = x.
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x0 = rand_t(&mut rng, 3, 3);

    let mut g = Graph::new();
    let x = g.param(x0.clone());
    let t = g.tanh(x).unwrap();
    let y = g.mul(t, x).unwrap();
    let l = g.mean(y).unwrap();
    let shared = g.backward(l).unwrap().get(x).unwrap().clone();

    let mut g = Graph::new();
    let x1 = g.param(x0.clone());
    let x2 = g.param(x0);
    let t = g.tanh(x1).unwrap();
    let y = g.mul(t, x2).unwrap();
    let l = g.mean(y).unwrap();
    let grads = g.backward(l).unwrap();
    let mut sum = grads.get(x1).unwrap().clone();
    sum.add_assign(grads.get(x2).unwrap());
    for (a, b) in shared.data().iter().zip(sum.data()) {
        assert!((a - b).abs() < 1e-15);
    }
}

#[test]
fn backward_is_bit_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut g = Graph::new();
        let a = g.param(rand_t(&mut rng, 4, 5));
        let b = g.param(rand_t(&mut rng, 5, 3));
        let y = g.matmul(a, b).unwrap();
        let s = g.softmax(y).unwrap();
        let l = g.mean(s).unwrap();
        let l2 = g.mse(y, s).unwrap();
        let tot = g.add(l, l2).unwrap();
        let gr = g.backward(tot).unwrap();
        (gr.get(a).unwrap().clone(), gr.get(b).unwrap().clone())
    };
    let (a1, b1) = run();
    let (a2, b2) = run();
    assert!(a1.data().iter().zip(a2.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    assert!(b1.data().iter().zip(b2.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
}

#[test]
fn identity_sum_has_zero_error() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let rep = grad_check(|g, v| g.mean(v[0]), &[rand_t(&mut rng, 3, 4)], H).unwrap();
    assert!(rep.max_rel_error < 1e-9, "{}", rep.max_rel_error);
}

#[test]
fn softmax_then_mse() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let target = rand_t(&mut rng, 3, 5);
    let rep = grad_check(
        |g, v| {
            let s = g.softmax(v[0])?;
            let t = g.constant(target.clone());
            g.mse(s, t)
        },
        &[rand_t(&mut rng, 3, 5)],
        H,
    )
    .unwrap();
    assert!(rep.max_rel_error < 1e-5);
}

#[test]
fn wrong_backward_is_detected() {
    // f(x) = mean(x^2); the fixture "forgets" the factor 2 in its derivative.
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = Tensor::uniform(2, 3, 2.0, &mut rng).clone();
    let n = x.len() as f64;
    let wrong: Vec<f64> = x.data().iter().map(|v| v / n).collect();
    let wrong = Tensor::from_vec(2, 3, wrong).unwrap();
    let value = |inp: &[Tensor]| inp[0].data().iter().map(|v| v * v).sum::<f64>() / n;
    let rep = compare_gradients(&[wrong], value, &[x], H, None);
    assert!(rep.max_rel_error > 1e-1, "{}", rep.max_rel_error);
}

#[test]
fn non_finite_reported_as_infinite_error() {
    let rep = grad_check(
        |g, v| {
            let l = g.mean(v[0])?;
            // 0 * inf at evaluation time
            let inf = g.constant(Tensor::scalar(f64::INFINITY));
            let p = g.mul(l, inf)?;
            g.scale(p, 0.0)
        },
        &[Tensor::scalar(1.0)],
        H,
    )
    .unwrap();
    assert!(rep.max_rel_error.is_infinite());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]
    #[test]
    fn reshape_round_trip_is_exact(r in 1usize..6, c in 1usize..6, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut g = Graph::new();
        let x = g.constant(rand_t(&mut rng, r, c));
        let y = g.reshape(x, c, r).unwrap();
        let z = g.reshape(y, r, c).unwrap();
        prop_assert_eq!(g.value(x), g.value(z));
    }

    #[test]
    fn softmax_rows_sum_to_one(r in 1usize..5, c in 1usize..8, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut g = Graph::new();
        let x = g.constant(Tensor::randn(r, c, 10.0, &mut rng));
        let y = g.softmax(x).unwrap();
        for i in 0..r {
            let s: f64 = g.value(y).row(i).iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-12);
        }
    }
}
