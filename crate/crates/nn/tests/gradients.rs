use ndarray::{Array2, ArrayD, IxDyn};
use nullsample_nn::init::Init;
use nullsample_nn::loss::{log_softmax, softmax, softmax_cross_entropy, softmax_entropy};
use nullsample_nn::{zero_grad, Activation, BatchNorm2d, Conv2d, Dense, Layer, Parameters, RAdam, ResidualDense, Sequential};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const EPS: f64 = 1e-5;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> ArrayD<f64> {
    ArrayD::from_shape_simple_fn(IxDyn(shape), || rng.random_range(-1.0..1.0))
}

/// `sum(f(x) * w)` under training-mode forward.
fn probe(net: &mut Sequential, x: &ArrayD<f64>, w: &ArrayD<f64>) -> f64 {
    let (y, _) = net.forward_train(x.clone());
    (&y * w).sum()
}

fn flat_params(net: &Sequential) -> Vec<(f64, f64)> {
    let mut out = Vec::new();
    net.visit("", &mut |_, p| out.extend(p.value.iter().zip(p.grad.iter()).map(|(&v, &g)| (v, g))));
    out
}

fn set_param(net: &mut Sequential, index: usize, value: f64) {
    let mut i = 0;
    net.visit_mut("", &mut |_, p| {
        for v in p.value.iter_mut() {
            if i == index {
                *v = value;
            }
            i += 1;
        }
    });
}

/// Compares analytic input and parameter gradients with central differences.
fn check(mut net: Sequential, input: &[usize], seed: u64, tol: f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = random(input, &mut rng);
    let (y, caches) = net.forward_train(x.clone());
    let w = random(y.shape(), &mut rng);
    zero_grad(&mut net);
    let dx = net.backward(caches, w.clone());

    for i in (0..x.len()).step_by(1 + x.len() / 24) {
        let mut plus = x.clone();
        let mut minus = x.clone();
        plus.as_slice_mut().unwrap()[i] += EPS;
        minus.as_slice_mut().unwrap()[i] -= EPS;
        let fd = (probe(&mut net, &plus, &w) - probe(&mut net, &minus, &w)) / (2.0 * EPS);
        let an = dx.as_slice().unwrap()[i];
        assert!((fd - an).abs() <= tol * (1.0 + fd.abs()), "input {i}: fd {fd} analytic {an}");
    }

    let params = flat_params(&net);
    for (i, &(v, an)) in params.iter().enumerate().step_by(1 + params.len() / 40) {
        set_param(&mut net, i, v + EPS);
        let up = probe(&mut net, &x, &w);
        set_param(&mut net, i, v - EPS);
        let down = probe(&mut net, &x, &w);
        set_param(&mut net, i, v);
        let fd = (up - down) / (2.0 * EPS);
        assert!((fd - an).abs() <= tol * (1.0 + fd.abs()), "param {i}: fd {fd} analytic {an}");
    }
}

#[test]
fn dense_stack_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let net = Sequential::new(vec![
        Layer::Dense(Dense::new(5, 7, Init::Xavier, &mut rng)),
        Layer::Act(Activation::Selu),
        Layer::Residual(ResidualDense::new(7, Activation::Tanh, Init::Xavier, &mut rng)),
        Layer::Act(Activation::Sigmoid),
        Layer::Dense(Dense::new(7, 3, Init::FanInUniform, &mut rng)),
    ]);
    check(net, &[4, 5], 2, 1e-6);
}

#[test]
fn conv_stack_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let net = Sequential::new(vec![
        Layer::Conv2d(Conv2d::same(2, 3, 3, Init::FanInUniform, &mut rng)),
        Layer::BatchNorm2d(BatchNorm2d::new(3)),
        Layer::Act(Activation::Tanh),
        Layer::MaxPool2,
        Layer::Conv2d(Conv2d::new(3, 4, 2, 1, 0, Init::Xavier, &mut rng)),
        Layer::Upsample2,
        Layer::GlobalAvgPool,
    ]);
    check(net, &[3, 2, 6, 6], 4, 1e-5);
}

#[test]
fn strided_conv_and_reshape_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let net = Sequential::new(vec![
        Layer::Conv2d(Conv2d::new(1, 2, 3, 2, 1, Init::LecunNormal, &mut rng)),
        Layer::Flatten,
        Layer::Dense(Dense::new(2 * 3 * 3, 2 * 3 * 3, Init::Xavier, &mut rng)),
        Layer::Unflatten([2, 3, 3]),
        Layer::Conv2d(Conv2d::same(2, 1, 3, Init::Xavier, &mut rng)),
    ]);
    check(net, &[2, 1, 5, 5], 6, 1e-6);
}

#[test]
fn cross_entropy_gradient_matches_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let logits = Array2::from_shape_simple_fn((4, 3), || rng.random_range(-2.0..2.0));
    let labels = [0, 2, 1, 2];
    let (_, grad) = softmax_cross_entropy(logits.view(), &labels).unwrap();
    for i in 0..4 {
        for j in 0..3 {
            let mut up = logits.clone();
            let mut down = logits.clone();
            up[[i, j]] += EPS;
            down[[i, j]] -= EPS;
            let fd = (softmax_cross_entropy(up.view(), &labels).unwrap().0
                - softmax_cross_entropy(down.view(), &labels).unwrap().0)
                / (2.0 * EPS);
            assert!((fd - grad[[i, j]]).abs() < 1e-8);
        }
    }
}

#[test]
fn entropy_gradient_matches_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let logits = Array2::from_shape_simple_fn((3, 4), || rng.random_range(-2.0..2.0));
    let (_, grad) = softmax_entropy(logits.view());
    for i in 0..3 {
        for j in 0..4 {
            let mut up = logits.clone();
            let mut down = logits.clone();
            up[[i, j]] += EPS;
            down[[i, j]] -= EPS;
            let fd = (softmax_entropy(up.view()).0 - softmax_entropy(down.view()).0) / (2.0 * EPS);
            assert!((fd - grad[[i, j]]).abs() < 1e-8);
        }
    }
}

#[test]
fn radam_fits_a_linear_map() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = random(&[64, 3], &mut rng);
    let truth = Array2::from_shape_vec((3, 1), vec![0.5, -1.0, 2.0]).unwrap();
    let x2 = x.clone().into_dimensionality::<ndarray::Ix2>().unwrap();
    let y = x2.dot(&truth);
    let mut net = Sequential::new(vec![Layer::Dense(Dense::new(3, 1, Init::Xavier, &mut rng))]);
    let mut opt = RAdam::new(0.05);
    let mut last = f64::INFINITY;
    for _ in 0..600 {
        zero_grad(&mut net);
        let (pred, caches) = net.forward_train(x.clone());
        let diff = pred.into_dimensionality::<ndarray::Ix2>().unwrap() - &y;
        last = diff.mapv(|d| d * d).mean().unwrap();
        net.backward(caches, (diff * (2.0 / 64.0)).into_dyn());
        opt.step(&mut net);
    }
    assert!(last < 1e-4, "final mse {last}");
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions(values in prop::collection::vec(-50.0f64..50.0, 12)) {
        let logits = Array2::from_shape_vec((3, 4), values).unwrap();
        for row in softmax(logits.view()).rows() {
            prop_assert!((row.sum() - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|&p| p >= 0.0));
        }
    }

    #[test]
    fn log_softmax_ignores_row_shifts(values in prop::collection::vec(-20.0f64..20.0, 8), shift in -100.0f64..100.0) {
        let logits = Array2::from_shape_vec((2, 4), values).unwrap();
        let shifted = &logits + shift;
        let a = log_softmax(logits.view());
        let b = log_softmax(shifted.view());
        for (x, y) in a.iter().zip(b.iter()) {
            prop_assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn entropy_is_bounded_by_log_classes(values in prop::collection::vec(-30.0f64..30.0, 10)) {
        let logits = Array2::from_shape_vec((2, 5), values).unwrap();
        let (h, _) = softmax_entropy(logits.view());
        prop_assert!(h >= -1e-12 && h <= 5f64.ln() + 1e-12);
    }
}
