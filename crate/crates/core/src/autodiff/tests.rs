use super::*;
use crate::error::{Error, Result};
use crate::rng::{gaussian_tensor, stream};

const TOL: f64 = 1e-5;
const H: f64 = 1e-6;

fn weighted_sum(g: &mut Graph, v: Var, seed: u64) -> Result<Var> {
    let shape = g.value(v).shape().to_vec();
    let w = gaussian_tensor(&mut stream(seed ^ 0xabcdef), &shape, 1.0);
    let w = g.constant(w);
    let p = g.mul(v, w)?;
    g.sum(p)
}

fn check(f: impl Fn(&mut Graph, Var) -> Result<Var>, x: &Tensor) -> f64 {
    finite_diff_check(f, x, H).unwrap()
}

fn rand(seed: u64, shape: &[usize]) -> Tensor {
    gaussian_tensor(&mut stream(seed), shape, 1.0)
}

#[test]
fn softmax_of_equal_logits_is_uniform() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::zeros(&[1, 3]));
    let y = g.softmax_rows(x).unwrap();
    for v in g.value(y).data() {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }
}

#[test]
fn l2_normalize_three_four_five() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::row_vector(&[3.0, 4.0]));
    let y = g.l2_normalize_rows(x).unwrap();
    assert_eq!(g.value(y).data(), &[0.6, 0.8]);
}

#[test]
fn pairwise_distance_of_row_with_itself_is_zero() {
    let mut g = Graph::new();
    let x = g.constant(rand(1, &[1, 5]));
    let d = g.pairwise_euclidean(x, x).unwrap();
    assert_eq!(g.value(d).item(), 0.0);
}

#[test]
fn gradient_of_sum_is_ones() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::row_vector(&[0.5, -2.0, 7.0]), true);
    let s = g.sum(x).unwrap();
    assert_eq!(g.backward(s).unwrap().get(x).data(), &[1.0, 1.0, 1.0]);
}

#[test]
fn gradient_of_square() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::scalar(2.0), true);
    let y = g.mul(x, x).unwrap();
    assert_eq!(g.backward(y).unwrap().get(x).item(), 4.0);
}

#[test]
fn random_five_node_graph_matches_central_differences() {
    for seed in 0..20 {
        let b = rand(100 + seed, &[4, 3]);
        let x = rand(200 + seed, &[2, 4]);
        let err = check(
            |g, x| {
                let b = g.constant(b.clone());
                let h = g.matmul(x, b)?;
                let s = g.sin(h)?;
                let p = g.mul(s, h)?;
                let e = g.softmax_rows(p)?;
                weighted_sum(g, e, seed)
            },
            &x,
        );
        assert!(err < TOL, "seed {seed}: {err}");
    }
}

#[test]
fn constant_function_has_zero_gradient_and_error() {
    let x = rand(3, &[2, 2]);
    let err = finite_diff_check(|g, _x| Ok(g.constant(Tensor::scalar(1.5))), &x, H).unwrap();
    assert_eq!(err, 0.0);
}

#[test]
fn softmax_matmul_gradient_check() {
    for seed in 0..20 {
        let b = rand(seed, &[4, 4]);
        let x = rand(seed + 50, &[4, 4]);
        let err = check(
            |g, x| {
                let b = g.constant(b.clone());
                let h = g.matmul(x, b)?;
                let s = g.softmax_rows(h)?;
                weighted_sum(g, s, seed)
            },
            &x,
        );
        assert!(err < TOL, "seed {seed}: {err}");
    }
}

#[test]
fn cross_entropy_at_uniform_logits_has_closed_form_gradient() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::zeros(&[2, 4]), true);
    let ce = g.cross_entropy(x, &[1, 3], None).unwrap();
    assert!((g.value(ce).item() - 4f64.ln()).abs() < 1e-15);
    let grad = g.backward(ce).unwrap().get(x);
    for i in 0..2 {
        for j in 0..4 {
            let target = if i == 0 { 1 } else { 3 };
            let onehot = if j == target { 1.0 } else { 0.0 };
            let expected = (0.25 - onehot) / 2.0;
            assert!((grad.get2(i, j) - expected).abs() < 1e-15);
        }
    }
    let err = check(|g, x| g.cross_entropy(x, &[1, 3], None), &Tensor::zeros(&[2, 4]));
    assert!(err < TOL);
}

/// Every primitive, checked against central differences on 20 seeds.
#[test]
fn every_primitive_passes_gradient_check() {
    type Case = (&'static str, Box<dyn Fn(u64) -> f64>);
    let cases: Vec<Case> = vec![
        ("matmul lhs", Box::new(|s| {
            let b = rand(s + 1, &[3, 2]);
            check(|g, x| { let b = g.constant(b.clone()); let y = g.matmul(x, b)?; weighted_sum(g, y, s) }, &rand(s, &[4, 3]))
        })),
        ("matmul rhs", Box::new(|s| {
            let a = rand(s + 1, &[4, 3]);
            check(|g, x| { let a = g.constant(a.clone()); let y = g.matmul(a, x)?; weighted_sum(g, y, s) }, &rand(s, &[3, 2]))
        })),
        ("matmul_nt both", Box::new(|s| {
            check(|g, x| { let y = g.matmul_nt(x, x)?; weighted_sum(g, y, s) }, &rand(s, &[3, 4]))
        })),
        ("add/sub/mul", Box::new(|s| {
            let c = rand(s + 1, &[2, 3]);
            check(|g, x| {
                let c = g.constant(c.clone());
                let a = g.add(x, c)?; let b = g.sub(a, x)?; let m = g.mul(b, x)?; let m = g.mul(m, x)?;
                weighted_sum(g, m, s)
            }, &rand(s, &[2, 3]))
        })),
        ("add_row + scale", Box::new(|s| {
            let a = rand(s + 1, &[4, 3]);
            check(|g, x| { let a = g.constant(a.clone()); let y = g.add_row(a, x)?; let y = g.scale(y, -0.7)?; let y = g.mul(y, y)?; weighted_sum(g, y, s) }, &rand(s, &[1, 3]))
        })),
        ("concat/slice", Box::new(|s| {
            let c = rand(s + 1, &[2, 3]);
            check(|g, x| {
                let c = g.constant(c.clone());
                let y = g.concat_rows(&[c, x, x])?; let z = g.slice_rows(y, 1, 4)?; let z = g.mul(z, z)?;
                weighted_sum(g, z, s)
            }, &rand(s, &[2, 3]))
        })),
        ("transpose", Box::new(|s| {
            check(|g, x| { let t = g.transpose(x)?; let y = g.matmul(t, x)?; weighted_sum(g, y, s) }, &rand(s, &[3, 2]))
        })),
        ("softmax_rows", Box::new(|s| {
            check(|g, x| { let y = g.softmax_rows(x)?; weighted_sum(g, y, s) }, &rand(s, &[3, 5]))
        })),
        ("l2_normalize_rows", Box::new(|s| {
            check(|g, x| { let y = g.l2_normalize_rows(x)?; weighted_sum(g, y, s) }, &rand(s, &[3, 4]))
        })),
        ("mean_rows", Box::new(|s| {
            check(|g, x| { let y = g.mean_rows(x)?; let y = g.mul(y, y)?; weighted_sum(g, y, s) }, &rand(s, &[5, 3]))
        })),
        ("mean", Box::new(|s| {
            check(|g, x| { let y = g.mul(x, x)?; g.mean(y) }, &rand(s, &[2, 3]))
        })),
        ("exp/log", Box::new(|s| {
            check(|g, x| { let e = g.exp(x)?; let c = g.constant(Tensor::full(&[2, 3], 1.0)); let e1 = g.add(e, c)?; let l = g.log(e1)?; weighted_sum(g, l, s) }, &rand(s, &[2, 3]))
        })),
        ("sin/cos", Box::new(|s| {
            check(|g, x| { let a = g.sin(x)?; let b = g.cos(x)?; let y = g.mul(a, b)?; weighted_sum(g, y, s) }, &rand(s, &[2, 3]))
        })),
        ("leaky_relu", Box::new(|s| {
            check(|g, x| { let y = g.leaky_relu(x, 0.2)?; let y = g.mul(y, y)?; weighted_sum(g, y, s) }, &rand(s, &[3, 4]))
        })),
        ("segment_mean", Box::new(|s| {
            check(|g, x| { let y = g.segment_mean(x, vec![vec![0, 2], vec![1], vec![3, 1, 0]])?; let y = g.mul(y, y)?; weighted_sum(g, y, s) }, &rand(s, &[4, 3]))
        })),
        ("gather_rows/pick", Box::new(|s| {
            check(|g, x| { let y = g.gather_rows(x, &[2, 0, 2])?; let y = g.mul(y, y)?; let p = g.pick(y, &[1, 0, 2])?; weighted_sum(g, p, s) }, &rand(s, &[3, 3]))
        })),
        ("cross_entropy masked", Box::new(|s| {
            let mask = vec![true, false, true, true, true, true, false, true, true];
            check(|g, x| g.cross_entropy(x, &[0, 2, 1], Some(mask.clone())), &rand(s, &[3, 3]))
        })),
        ("pairwise_euclidean", Box::new(|s| {
            let b = rand(s + 1, &[2, 4]);
            check(|g, x| { let b = g.constant(b.clone()); let d = g.pairwise_euclidean(x, b)?; let d2 = g.pairwise_euclidean(b, x)?; let t = g.transpose(d2)?; let y = g.add(d, t)?; weighted_sum(g, y, s) }, &rand(s, &[3, 4]))
        })),
        ("pairwise_cosine", Box::new(|s| {
            let b = rand(s + 1, &[2, 4]);
            check(|g, x| { let b = g.constant(b.clone()); let d = g.pairwise_cosine(x, b)?; let d2 = g.pairwise_cosine(b, x)?; let t = g.transpose(d2)?; let y = g.add(d, t)?; weighted_sum(g, y, s) }, &rand(s, &[3, 4]))
        })),
        ("neighbor_max", Box::new(|s| {
            check(|g, x| { let y = g.neighbor_max(x, &[1, 2, 0, 2, 3, 0, 0, 1], 2)?; weighted_sum(g, y, s) }, &rand(s, &[4, 3]))
        })),
        ("relative_logits", Box::new(|s| {
            let rel = rand(s + 1, &[3, 2, 4]);
            check(|g, x| { let y = g.relative_logits(x, rel.clone())?; let y = g.softmax_rows(y)?; weighted_sum(g, y, s) }, &rand(s, &[3, 4]))
        })),
    ];
    for (name, case) in &cases {
        for seed in 0..20 {
            let err = case(seed * 7 + 1);
            assert!(err < TOL, "{name} seed {seed}: rel err {err}");
        }
    }
}

#[test]
fn fan_out_gradients_accumulate() {
    let x0 = rand(9, &[2, 3]);
    // y = sin(x) + x·x via a shared leaf ...
    let mut g = Graph::new();
    let x = g.leaf(x0.clone(), true);
    let a = g.sin(x).unwrap();
    let b = g.mul(x, x).unwrap();
    let y = g.add(a, b).unwrap();
    let s = g.sum(y).unwrap();
    let shared = g.backward(s).unwrap().get(x);

    // ... equals the sum over two duplicated leaves.
    let mut g = Graph::new();
    let x1 = g.leaf(x0.clone(), true);
    let x2 = g.leaf(x0.clone(), true);
    let a = g.sin(x1).unwrap();
    let b = g.mul(x2, x2).unwrap();
    let y = g.add(a, b).unwrap();
    let s = g.sum(y).unwrap();
    let grads = g.backward(s).unwrap();
    let (g1, g2) = (grads.get(x1), grads.get(x2));
    for i in 0..shared.numel() {
        assert!((shared.data()[i] - (g1.data()[i] + g2.data()[i])).abs() < 1e-15);
    }
}

#[test]
fn softmax_is_shift_invariant() {
    let x0 = rand(4, &[3, 6]);
    let mut shifted = x0.clone();
    shifted.data_mut().iter_mut().for_each(|v| *v += 123.25);
    let mut g = Graph::new();
    let a = g.constant(x0);
    let b = g.constant(shifted);
    let sa = g.softmax_rows(a).unwrap();
    let sb = g.softmax_rows(b).unwrap();
    assert!(g.value(sa).max_abs_diff(g.value(sb)) < 1e-12);
    for i in 0..3 {
        assert!((g.value(sa).row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn forward_is_bit_reproducible() {
    let run = || {
        let mut g = Graph::new();
        let x = g.constant(rand(5, &[8, 8]));
        let y = g.matmul_nt(x, x).unwrap();
        let y = g.softmax_rows(y).unwrap();
        let y = g.l2_normalize_rows(y).unwrap();
        g.value(y).clone()
    };
    let (a, b) = (run(), run());
    assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
}

#[test]
fn unreachable_leaf_gets_zero_gradient() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::row_vector(&[1.0, 2.0]), true);
    let unused = g.leaf(Tensor::row_vector(&[3.0]), true);
    let s = g.sum(x).unwrap();
    assert_eq!(g.backward(s).unwrap().get(unused).data(), &[0.0]);
}

#[test]
fn shape_mismatch_reports_both_shapes() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[2, 2]));
    match g.matmul(a, b) {
        Err(Error::ShapeMismatch { op, lhs, rhs }) => {
            assert_eq!(op, "matmul");
            assert_eq!(lhs, vec![2, 3]);
            assert_eq!(rhs, vec![2, 2]);
        }
        other => panic!("expected shape mismatch, got {other:?}"),
    }
    let n = g.len();
    assert!(g.add(a, b).is_err());
    assert_eq!(g.len(), n, "rejected op must not be recorded");
}

#[test]
fn non_finite_output_is_rejected_with_op_id() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::row_vector(&[-1.0]));
    match g.log(x) {
        Err(Error::NonFinite { op }) => assert_eq!(op, "log"),
        other => panic!("expected non-finite error, got {other:?}"),
    }
}

#[test]
fn non_scalar_loss_is_rejected() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::zeros(&[2, 2]), true);
    assert!(matches!(g.backward(x), Err(Error::NonScalarLoss(_))));
}

#[test]
fn finite_diff_flags_nondeterminism() {
    use std::cell::Cell;
    let calls = Cell::new(0.0);
    let res = finite_diff_check(
        |g, x| {
            calls.set(calls.get() + 1.0);
            let c = g.constant(Tensor::scalar(calls.get()));
            let s = g.sum(x)?;
            g.add(s, c)
        },
        &Tensor::scalar(1.0),
        H,
    );
    assert!(matches!(res, Err(Error::NonDeterministic)));
}

#[test]
fn finite_diff_rejects_step_out_of_range() {
    assert!(finite_diff_check(|g, x| g.sum(x), &Tensor::scalar(1.0), 1e-2).is_err());
}
