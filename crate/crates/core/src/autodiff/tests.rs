use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::{Error, Result};

const TOL: f64 = 1e-4;
const STEP: f64 = 1e-4;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

/// Reduces `v` to a scalar with fixed random weights so every output coordinate matters.
fn weighted_sum(g: &mut Graph, v: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = random(g.shape(v), &mut rng);
    let w = g.constant(w)?;
    let p = g.mul(v, w)?;
    g.sum(p)
}

fn check(name: &str, shape: &[usize], seed: u64, f: impl Fn(&mut Graph, Var) -> Result<Var>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let at = random(shape, &mut rng);
    let err = grad_check(f, &at, STEP).unwrap();
    assert!(err < TOL, "{name}: relative error {err}");
}

fn konst(g: &mut Graph, shape: &[usize], seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    g.constant(random(shape, &mut rng))
}

#[test]
fn softmax_of_zeros_is_uniform() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::zeros(vec![1, 2])).unwrap();
    let y = g.softmax(x).unwrap();
    assert_eq!(g.value(y).data(), &[0.5, 0.5]);
}

#[test]
fn cosine_with_itself_is_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut g = Graph::new();
    let x = g.constant(random(&[1, 6], &mut rng)).unwrap();
    let c = g.cosine(x, x).unwrap();
    assert!((g.scalar_value(c) - 1.0).abs() < 1e-15);
}

#[test]
fn matmul_with_identity() {
    let mut g = Graph::new();
    let a = g
        .constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap())
        .unwrap();
    let i = g
        .constant(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap())
        .unwrap();
    let y = g.matmul(a, i).unwrap();
    assert_eq!(g.value(y).data(), &[1.0, 2.0, 3.0, 4.0]);
}

#[test]
fn shape_mismatch_names_op_and_shapes() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::zeros(vec![2, 3])).unwrap();
    let b = g.constant(Tensor::zeros(vec![2, 3])).unwrap();
    match g.matmul(a, b) {
        Err(Error::Shape { op, lhs, rhs }) => {
            assert_eq!(op, "matmul");
            assert_eq!(lhs, vec![2, 3]);
            assert_eq!(rhs, vec![2, 3]);
        }
        other => panic!("expected shape error, got {:?}", other.err()),
    }
}

#[test]
fn non_finite_input_is_rejected() {
    let mut g = Graph::new();
    assert!(matches!(
        g.leaf(Tensor::new(vec![1, 2], vec![0.0, f64::NAN]).unwrap(), true),
        Err(Error::NonFinite { .. })
    ));
}

#[test]
fn square_gradient() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::scalar(3.0), true).unwrap();
    let y = g.mul(x, x).unwrap();
    let grads = g.backward(y).unwrap();
    assert_eq!(grads.get(x).data(), &[6.0]);
}

#[test]
fn backward_requires_scalar() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::zeros(vec![2, 2]), true).unwrap();
    let y = g.tanh(x).unwrap();
    assert!(matches!(g.backward(y), Err(Error::NotScalar(_))));
}

#[test]
fn mean_of_softmax_has_zero_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut g = Graph::new();
    let x = g.leaf(random(&[1, 5], &mut rng), true).unwrap();
    let s = g.softmax(x).unwrap();
    let m = g.mean(s).unwrap();
    let grads = g.backward(m).unwrap();
    for v in grads.get(x).data() {
        assert!(v.abs() < 1e-15);
    }
}

#[test]
fn non_participating_leaf_gets_zero_gradient() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::scalar(2.0), true).unwrap();
    let unused = g.leaf(Tensor::zeros(vec![2, 3]), true).unwrap();
    let y = g.mul(x, x).unwrap();
    let grads = g.backward(y).unwrap();
    assert_eq!(grads.get(unused).data(), &[0.0; 6]);
}

#[test]
fn matmul_chain_matches_finite_differences() {
    check("matmul chain", &[3, 4], 11, |g, x| {
        let b = konst(g, &[4, 3], 12)?;
        let c = konst(g, &[3, 4], 13)?;
        let y = g.matmul(x, b)?;
        let z = g.matmul(y, c)?;
        weighted_sum(g, z, 14)
    });
}

#[test]
fn grad_check_sum_of_squares() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let at = random(&[1, 5], &mut rng);
    let err = grad_check(
        |g, x| {
            let y = g.mul(x, x)?;
            g.sum(y)
        },
        &at,
        STEP,
    )
    .unwrap();
    assert!(err < 1e-6, "{err}");
}

#[test]
fn grad_check_constant_function() {
    let at = Tensor::zeros(vec![1, 3]);
    let err = grad_check(|g, _x| g.constant(Tensor::scalar(4.0)), &at, STEP).unwrap();
    assert_eq!(err, 0.0);
}

#[test]
fn grad_check_rejects_nondeterminism() {
    use std::cell::Cell;
    let calls = Cell::new(0.0);
    let at = Tensor::zeros(vec![1, 2]);
    let res = grad_check(
        |g, x| {
            calls.set(calls.get() + 1.0);
            let s = g.sum(x)?;
            g.offset(s, calls.get())
        },
        &at,
        STEP,
    );
    assert!(matches!(res, Err(Error::NonDeterministic(..))));
}

#[test]
fn grad_check_rejects_bad_step() {
    let at = Tensor::zeros(vec![1, 2]);
    assert!(grad_check(|g, x| g.sum(x), &at, 0.1).is_err());
}

#[test]
fn corrupted_backward_is_detected() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let at = random(&[2, 3], &mut rng);
    let f = |g: &mut Graph, x: Var| {
        let y = g.tanh(x)?;
        weighted_sum(g, y, 2)
    };
    assert!(grad_check_with(f, &at, STEP, None).unwrap() < TOL);
    assert!(grad_check_with(f, &at, STEP, Some(OpKind::Tanh)).unwrap() > 1e-2);
}

#[test]
fn conv_shapes_halve_and_double() {
    let spec = ConvSpec {
        kernel: 4,
        stride: 2,
        pad: 1,
    };
    for t in [2usize, 4, 8, 16, 40] {
        assert_eq!(spec.out_len(t), t / 2);
        assert_eq!(spec.transpose_out_len(t / 2), t);
    }
}

#[test]
fn backward_is_linear_in_the_loss() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let at = random(&[3, 4], &mut rng);
    let w1 = random(&[4, 4], &mut rng);
    let w2 = random(&[4, 2], &mut rng);
    let run = |which: u8| -> Vec<f64> {
        let mut g = Graph::new();
        let x = g.leaf(at.clone(), true).unwrap();
        let a = g.constant(w1.clone()).unwrap();
        let b = g.constant(w2.clone()).unwrap();
        let h = g.matmul(x, a).unwrap();
        let h = g.tanh(h).unwrap();
        let l1 = g.matmul(h, b).unwrap();
        let l1 = g.cross_entropy(l1, &[0, 1, 1]).unwrap();
        let s = g.softmax(h).unwrap();
        let l2 = g.mean(s).unwrap();
        let l2 = g.mul(l2, l2).unwrap();
        let loss = match which {
            0 => l1,
            1 => l2,
            _ => g.add(l1, l2).unwrap(),
        };
        g.backward(loss).unwrap().get(x).into_data()
    };
    let (a, b, both) = (run(0), run(1), run(2));
    for i in 0..a.len() {
        assert!((a[i] + b[i] - both[i]).abs() <= 1e-12);
    }
}

#[test]
fn frozen_parameters_are_not_bound() {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let w = store.add_normal("w", vec![3, 3], 1.0, &mut rng);
    let v = store.add_normal("v", vec![3, 3], 1.0, &mut rng);
    store.set_trainable_prefix("v", false);
    let mut g = Graph::new();
    let a = g.param(&store, w);
    let b = g.param(&store, v);
    assert_eq!(g.param(&store, w), a);
    let y = g.matmul(a, b).unwrap();
    let y = g.sum(y).unwrap();
    let grads = g.backward(y).unwrap();
    let bound: Vec<_> = grads.param_grads().into_iter().map(|(id, _)| id).collect();
    assert_eq!(bound, vec![w]);
}

mod props {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn softmax_rows_are_distributions(rows in 1usize..5, cols in 1usize..8, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut g = Graph::new();
            let mut t = random(&[rows, cols], &mut rng);
            t.data_mut().iter_mut().for_each(|v| *v *= 5.0);
            let x = g.constant(t).unwrap();
            let y = g.softmax(x).unwrap();
            for r in g.value(y).to_rows() {
                let s: f64 = r.iter().sum();
                prop_assert!((s - 1.0).abs() <= 1e-9);
                for p in r {
                    prop_assert!(p > 0.0 && p < 1.0 || cols == 1);
                }
            }
        }

        #[test]
        fn random_tanh_matmul_passes_grad_check(m in 1usize..6, k in 1usize..6, n in 1usize..6, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let at = random(&[m, k], &mut rng);
            let w = random(&[k, n], &mut rng);
            let err = grad_check(|g, x| {
                let w = g.constant(w.clone())?;
                let y = g.matmul(x, w)?;
                let y = g.tanh(y)?;
                let y = g.log_softmax(y)?;
                weighted_sum(g, y, seed ^ 1)
            }, &at, STEP).unwrap();
            prop_assert!(err < TOL);
        }
    }
}
