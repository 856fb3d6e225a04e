mod common;

use nalgebra::{DMatrix, DVector};
use ndarray::{Array2, Array4};
use nullsample::checkpoint::{load_flow, save_flow};
use nullsample::flow::{
    coupling_scale, nll_objective, squeeze, unsqueeze, standard_normal_log_density, CouplingMask, FlowConfig,
    FlowModel,
};
use nullsample::invariance::PartitionSpec;
use nullsample_nn::{zero_grad, RAdam};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn tiny(mask: CouplingMask, squeeze: bool, factor_out: bool) -> FlowConfig {
    FlowConfig {
        input_shape: [2, 4, 4],
        levels: 2,
        depth: 2,
        hidden_channels: 6,
        kernel: 3,
        squeeze,
        factor_out,
        mask,
    }
}

fn perturbed(config: FlowConfig, seed: u64, scale: f64) -> FlowModel {
    let mut flow = FlowModel::new(config, seed).unwrap();
    common::perturb(&mut flow, scale, seed + 1000);
    flow
}

fn gaussian(n: usize, d: usize, seed: u64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array2::from_shape_simple_fn((n, d), || rng.sample(StandardNormal))
}

fn max_abs_diff(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    (a - b).iter().fold(0.0, |m, v| m.max(v.abs()))
}

/// Solves `forward(x) = z` for one row by Newton's method with a
/// finite-difference Jacobian.
fn newton_inverse(flow: &FlowModel, z: &Array2<f64>) -> Array2<f64> {
    let d = z.ncols();
    let mut x = z.clone();
    for _ in 0..30 {
        let fx = flow.forward(x.view()).unwrap().0;
        let residual = &fx - z;
        if residual.iter().all(|r| r.abs() < 1e-12) {
            break;
        }
        let h = 1e-6;
        let mut jac = DMatrix::zeros(d, d);
        for j in 0..d {
            let mut xp = x.clone();
            xp[[0, j]] += h;
            let fp = flow.forward(xp.view()).unwrap().0;
            for i in 0..d {
                jac[(i, j)] = (fp[[0, i]] - fx[[0, i]]) / h;
            }
        }
        let r = DVector::from_iterator(d, residual.iter().copied());
        let step = jac.lu().solve(&r).expect("invertible jacobian");
        for j in 0..d {
            x[[0, j]] -= step[j];
        }
    }
    x
}

#[test]
fn coupling_scale_stays_inside_open_interval() {
    for logit in [-1e6, -50.0, -1.0, 0.0, 1.0, 50.0, 1e6] {
        let s = coupling_scale(logit);
        assert!(s > 0.5 && s < 1.5, "scale {s} at logit {logit}");
    }
    assert!((coupling_scale(0.0) - 1.0).abs() < 1e-15);
}

#[test]
fn root_finding_agrees_with_analytic_inverse() {
    for (k, mask) in [CouplingMask::ChannelHalves, CouplingMask::Checkerboard].into_iter().enumerate() {
        let config = FlowConfig { input_shape: [2, 2, 2], levels: 1, ..tiny(mask, false, false) };
        let flow = perturbed(config, 20 + k as u64, 0.2);
        for trial in 0..3 {
            let z = gaussian(1, 8, 40 + trial);
            let analytic = flow.inverse(z.view()).unwrap();
            let solved = newton_inverse(&flow, &z);
            assert!(max_abs_diff(&analytic, &solved) < 1e-3);
        }
    }
}

#[test]
fn nll_loss_is_mean_negative_log_prob_per_dimension() {
    let flow = perturbed(tiny(CouplingMask::ChannelHalves, true, true), 3, 0.05);
    let x = gaussian(7, 32, 4);
    let lp = flow.log_prob(x.view()).unwrap();
    let expected = -lp.mean().unwrap() / 32.0;
    assert!((flow.nll_loss(x.view()).unwrap() - expected).abs() < 1e-12);
    let single = x.slice(ndarray::s![..1, ..]);
    assert!((flow.nll_loss(single).unwrap() + lp[0] / 32.0).abs() < 1e-12);

    let (z, logdet) = flow.forward(x.view()).unwrap();
    let (objective, _, _) = nll_objective(z.view(), &logdet);
    assert!((objective - expected).abs() < 1e-12);
}

#[test]
fn batching_does_not_change_outputs() {
    let flow = perturbed(tiny(CouplingMask::Checkerboard, true, false), 5, 0.05);
    let x = gaussian(6, 32, 6);
    let (z, logdet) = flow.forward(x.view()).unwrap();
    for i in 0..6 {
        let row = x.slice(ndarray::s![i..i + 1, ..]);
        let (zi, ldi) = flow.forward(row).unwrap();
        assert!(max_abs_diff(&zi, &z.slice(ndarray::s![i..i + 1, ..]).to_owned()) < 1e-12);
        assert!((ldi[0] - logdet[i]).abs() < 1e-12);
    }
}

#[test]
fn construction_is_deterministic_in_the_seed() {
    let a = FlowModel::new(FlowConfig::adult(), 11).unwrap();
    let b = FlowModel::new(FlowConfig::adult(), 11).unwrap();
    let c = FlowModel::new(FlowConfig::adult(), 12).unwrap();
    assert_eq!(a.tensors(), b.tensors());
    assert_ne!(a.tensors(), c.tensors());
}

#[test]
fn checkpoint_round_trip_preserves_the_map() {
    let flow = perturbed(tiny(CouplingMask::ChannelHalves, true, true), 9, 0.05);
    let partition = PartitionSpec::new(32, 5).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("flow.safetensors");
    save_flow(&path, &flow, &partition).unwrap();
    let (loaded, loaded_partition) = load_flow(&path, Some([2, 4, 4])).unwrap();
    assert_eq!(loaded_partition, partition);
    let x = gaussian(4, 32, 10);
    // Tensors are stored as f32.
    assert!(max_abs_diff(&flow.forward(x.view()).unwrap().0, &loaded.forward(x.view()).unwrap().0) < 1e-4);
    assert!(load_flow(&path, Some([3, 4, 4])).is_err());
}

/// Fits a 2-d flow to a two-component mixture for a few hundred steps, then
/// integrates its density on a grid.
#[test]
fn trained_two_dimensional_density_integrates_to_one() {
    let config = FlowConfig {
        input_shape: [2, 1, 1],
        levels: 1,
        depth: 4,
        hidden_channels: 16,
        kernel: 1,
        squeeze: false,
        factor_out: false,
        mask: CouplingMask::ChannelHalves,
    };
    let mut flow = FlowModel::new(config, 1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut opt = RAdam::new(5e-3);
    let mut first = None;
    let mut last = 0.0;
    for _ in 0..300 {
        let x = Array2::from_shape_fn((64, 2), |(_, j)| {
            let centre = if rng.random::<bool>() { 1.5 } else { -1.5 };
            let noise: f64 = rng.sample(StandardNormal);
            if j == 0 { centre + 0.5 * noise } else { 0.7 * noise }
        });
        zero_grad(&mut flow);
        let (z, logdet, tape) = flow.forward_train(x.view()).unwrap();
        let (loss, dz, dlogdet) = nll_objective(z.view(), &logdet);
        flow.backward(tape, dz.view(), &dlogdet);
        opt.step(&mut flow);
        first.get_or_insert(loss);
        last = loss;
    }
    assert!(last < first.unwrap(), "training did not reduce the loss");

    let (lo, hi, step) = (-9.0, 9.0, 0.02);
    let n = ((hi - lo) / step) as usize;
    let mut mass = 0.0;
    for i in 0..n {
        let xi = lo + (i as f64 + 0.5) * step;
        let grid = Array2::from_shape_fn((n, 2), |(j, k)| if k == 0 { xi } else { lo + (j as f64 + 0.5) * step });
        mass += flow.log_prob(grid.view()).unwrap().mapv(f64::exp).sum() * step * step;
    }
    assert!((mass - 1.0).abs() < 1e-2, "density integrates to {mass}");
}

#[test]
fn fresh_flow_preserves_volume() {
    let flow = FlowModel::new(tiny(CouplingMask::ChannelHalves, true, true), 13).unwrap();
    let x = gaussian(5, 32, 14);
    let expected = standard_normal_log_density(x.view());
    let lp = flow.log_prob(x.view()).unwrap();
    assert!((&lp - &expected).iter().all(|v| v.abs() < 1e-9));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn flows_are_bijective(
        seed in 0u64..1000,
        checkerboard in any::<bool>(),
        do_squeeze in any::<bool>(),
        factor_out in any::<bool>(),
    ) {
        let mask = if checkerboard { CouplingMask::Checkerboard } else { CouplingMask::ChannelHalves };
        let flow = perturbed(tiny(mask, do_squeeze, factor_out && do_squeeze), seed, 0.05);
        let x = gaussian(8, 32, seed);
        let (z, _) = flow.forward(x.view()).unwrap();
        let back = flow.inverse(z.view()).unwrap();
        prop_assert!(max_abs_diff(&back, &x) < 1e-6);
    }

    #[test]
    fn squeeze_is_an_invertible_permutation(values in prop::collection::vec(-10.0f64..10.0, 2 * 3 * 4 * 6)) {
        let x = Array4::from_shape_vec((2, 3, 4, 6), values).unwrap();
        let y = squeeze(x.view());
        prop_assert_eq!(y.dim(), (2, 12, 2, 3));
        let mut a: Vec<f64> = x.iter().copied().collect();
        let mut b: Vec<f64> = y.iter().copied().collect();
        a.sort_by(f64::total_cmp);
        b.sort_by(f64::total_cmp);
        prop_assert_eq!(a, b);
        prop_assert_eq!(unsqueeze(y.view()), x);
    }

    #[test]
    fn scale_is_bounded_for_any_logit(logit in -1e6f64..1e6) {
        let s = coupling_scale(logit);
        prop_assert!(s > 0.5 && s < 1.5);
    }
}
