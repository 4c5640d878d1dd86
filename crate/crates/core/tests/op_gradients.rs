//! Every differentiable op against the central-difference oracle, 64-bit,
//! on randomized small instances.

use posbias_core::diff::{finite_diff_check, Bindings, DiffError, Graph, ParamSet, Tensor};
use posbias_core::gradsuite;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TOL: f64 = 1e-4;
const TRIALS: u64 = 20;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.5..1.5))
}

#[test]
fn every_op_matches_central_differences() {
    for case in gradsuite::op_cases() {
        let err = gradsuite::worst(&case, TRIALS).unwrap();
        assert!(err < TOL, "{}: relative error {err:e}", case.name);
    }
}

#[test]
fn square_has_derivative_six_at_three() {
    let mut params = ParamSet::new();
    params.insert("x", Tensor::scalar(3.0f64)).unwrap();
    let mut g = Graph::new();
    let x = g.param("x");
    let sq = g.mul(x, x);
    let loss = g.sum(sq);
    g.evaluate(&params, &Bindings::new()).unwrap();
    let mut grads = posbias_core::diff::Gradients::new(&params);
    g.backward(loss, &mut grads).unwrap();
    assert_eq!(grads.get(0).unwrap(), &[6.0]);
    // a second call accumulates
    g.backward(loss, &mut grads).unwrap();
    assert_eq!(grads.get(0).unwrap(), &[12.0]);
    grads.zero();
    assert_eq!(grads.get(0).unwrap(), &[0.0]);
}

#[test]
fn sum_of_softmax_has_zero_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut params = ParamSet::new();
    params.insert("z", rand_tensor(&mut rng, vec![1, 8])).unwrap();
    let mut g = Graph::new();
    let z = g.param("z");
    let s = g.softmax(z);
    let loss = g.sum(s);
    g.evaluate(&params, &Bindings::new()).unwrap();
    let mut grads = posbias_core::diff::Gradients::new(&params);
    g.backward(loss, &mut grads).unwrap();
    assert!(grads.get(0).unwrap().iter().all(|v| v.abs() < 1e-12));
}

#[test]
fn linear_square_loss_is_exact() {
    // y = w·x, loss = y²: central differences are exact for quadratics.
    let mut params = ParamSet::new();
    params.insert("w", Tensor::new(vec![3, 1], vec![0.3, -1.2, 2.0]).unwrap()).unwrap();
    let mut inputs = Bindings::new();
    inputs.insert("x".into(), Tensor::new(vec![1, 3], vec![1.5, 0.25, -0.5]).unwrap());
    let mut g = Graph::new();
    let x = g.input("x");
    let w = g.param("w");
    let y = g.matmul(x, w);
    let sq = g.mul(y, y);
    let loss = g.sum(sq);
    let err = finite_diff_check(&mut g, &mut params, &inputs, loss, 1e-3).unwrap();
    assert!(err < 1e-8, "{err:e}");
}

#[test]
fn zero_step_is_rejected() {
    let mut params = ParamSet::new();
    params.insert("w", Tensor::scalar(1.0f64)).unwrap();
    let mut g = Graph::new();
    let w = g.param("w");
    let loss = g.sum(w);
    let err = finite_diff_check(&mut g, &mut params, &Bindings::new(), loss, 0.0).unwrap_err();
    assert!(matches!(err, DiffError::InvalidStep(_)));
}

#[test]
fn backward_requires_scalar_and_evaluation() {
    let mut params = ParamSet::new();
    params.insert("w", Tensor::<f64>::zeros(vec![2, 2])).unwrap();
    let mut g = Graph::new();
    let w = g.param("w");
    let t = g.tanh(w);
    let mut grads = posbias_core::diff::Gradients::new(&params);
    assert!(matches!(g.backward(t, &mut grads), Err(DiffError::NotEvaluated)));
    g.evaluate(&params, &Bindings::new()).unwrap();
    assert!(matches!(g.backward(t, &mut grads), Err(DiffError::NotScalar(_))));
}

#[test]
fn non_finite_values_abort_evaluation() {
    let mut params = ParamSet::new();
    params.insert("w", Tensor::new(vec![1, 2], vec![1e300f64, 1e300]).unwrap()).unwrap();
    let mut g = Graph::new();
    let w = g.param("w");
    let sq = g.mul(w, w);
    let _ = g.sum(sq);
    let err = g.evaluate(&params, &Bindings::new()).unwrap_err();
    assert!(matches!(err, DiffError::NonFinite { op: "mul", .. }), "{err}");
}

#[test]
fn shape_mismatch_is_reported() {
    let mut params = ParamSet::new();
    params.insert("a", Tensor::<f32>::zeros(vec![2, 3])).unwrap();
    params.insert("b", Tensor::<f32>::zeros(vec![2, 3])).unwrap();
    let mut g = Graph::new();
    let (a, b) = (g.param("a"), g.param("b"));
    g.matmul(a, b);
    assert!(matches!(g.evaluate(&params, &Bindings::new()), Err(DiffError::Shape { op: "matmul", .. })));
}

#[test]
fn uniform_cross_entropy_is_log_vocab() {
    let v = 37;
    let mut g = Graph::<f64>::new();
    let l = g.constant(Tensor::zeros(vec![3, v]));
    let loss = g.cross_entropy(l, vec![Some(4), Some(36), None]);
    g.mark_output("loss", loss);
    let out = g.evaluate(&ParamSet::new(), &Bindings::new()).unwrap();
    assert!((out["loss"].data()[0] - (v as f64).ln()).abs() < 1e-12);
}

proptest::proptest! {
    #[test]
    fn softmax_rows_are_distributions(rows in 1usize..6, cols in 1usize..9, seed in proptest::prelude::any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::from_fn(vec![rows, cols], |_| rng.random_range(-30.0..30.0));
        let mut g = Graph::<f64>::new();
        let c = g.constant(x);
        let s = g.softmax(c);
        g.mark_output("s", s);
        let square = g.constant(Tensor::from_fn(vec![cols, cols], |i| (i % 7) as f64 - 3.0));
        let cs = g.causal_softmax(square);
        g.mark_output("c", cs);
        let out = g.evaluate(&ParamSet::new(), &Bindings::new()).unwrap();
        for (name, n) in [("s", cols), ("c", cols)] {
            for (r, row) in out[name].data().chunks(n).enumerate() {
                proptest::prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                proptest::prop_assert!(row.iter().all(|v| *v >= 0.0));
                if name == "c" {
                    proptest::prop_assert!(row[r + 1..].iter().all(|v| *v == 0.0));
                }
            }
        }
    }
}
