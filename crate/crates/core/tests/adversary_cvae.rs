use ndarray::{s, Array2};
use nullsample::adversary::{AdversaryEnsemble, AdversaryInput, EnsembleSpec, GradientReversal, MemberArch};
use nullsample::cvae::{kl_divergence, one_hot, reparameterize, CvaeArch, CvaeConfig, CvaeError, CvaeModel, ReconLoss};
use nullsample_nn::loss::softmax_cross_entropy;
use nullsample_nn::RAdam;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn gaussian(n: usize, d: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    Array2::from_shape_simple_fn((n, d), || rng.sample(StandardNormal))
}

fn small_spec(members: usize, reinit: f64) -> EnsembleSpec {
    EnsembleSpec { members, reinit_probability: reinit, arch: MemberArch::Mlp { hidden: 16 } }
}

#[test]
fn reinitialisation_count_matches_its_expectation() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut ensemble = AdversaryEnsemble::new(small_spec(5, 0.2), 2, 2, 1e-3, &mut rng).unwrap();
    let epochs = 10_000;
    let total: usize = (0..epochs).map(|_| ensemble.maybe_reinitialize(&mut rng)).sum();
    let mean = total as f64 / epochs as f64;
    assert!((mean - 1.0).abs() < 0.05, "mean reinitialisations {mean}");

    let mut never = AdversaryEnsemble::new(small_spec(3, 0.0), 2, 2, 1e-3, &mut rng).unwrap();
    let mut always = AdversaryEnsemble::new(small_spec(3, 1.0), 2, 2, 1e-3, &mut rng).unwrap();
    assert_eq!(never.maybe_reinitialize(&mut rng), 0);
    assert_eq!(always.maybe_reinitialize(&mut rng), 3);
}

#[test]
fn ensemble_loss_is_mean_member_cross_entropy() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let ensemble = AdversaryEnsemble::new(small_spec(4, 0.0), 3, 3, 1e-3, &mut rng).unwrap();
    let reps = gaussian(20, 3, &mut rng);
    let s: Vec<usize> = (0..20).map(|i| i % 3).collect();
    let logits = ensemble.member_logits(reps.view());
    let oracle: f64 =
        logits.iter().map(|l| softmax_cross_entropy(l.view(), &s).unwrap().0).sum::<f64>() / logits.len() as f64;
    assert!((ensemble.loss(reps.view(), &s).unwrap() - oracle).abs() < 1e-12);
}

#[test]
fn gradient_reversal_is_identity_forward_and_negated_backward() {
    let grl = GradientReversal::new(0.7);
    let g = Array2::from_shape_vec((1, 3), vec![1.0, -2.0, 0.5]).unwrap();
    assert_eq!(grl.forward(&g), g);
    assert_eq!(grl.backward(g.view()), g.mapv(|v| -0.7 * v));
}

#[test]
fn adversary_cannot_beat_chance_on_independent_labels() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut ensemble = AdversaryEnsemble::new(small_spec(3, 0.0), 4, 2, 1e-3, &mut rng).unwrap();
    for _ in 0..300 {
        let reps = gaussian(64, 4, &mut rng);
        let s: Vec<usize> = (0..64).map(|_| rng.random_range(0..2)).collect();
        ensemble.loss_and_grad(reps.view(), &s).unwrap();
        ensemble.step();
    }
    let reps = gaussian(4000, 4, &mut rng);
    let s: Vec<usize> = (0..4000).map(|_| rng.random_range(0..2)).collect();
    for acc in ensemble.member_accuracies(reps.view(), &s) {
        assert!((acc - 0.5).abs() < 0.05, "held-out accuracy {acc}");
    }
    assert!((ensemble.loss(reps.view(), &s).unwrap() - 2f64.ln()).abs() < 0.1);
}

#[test]
fn adversary_input_follows_the_dataset() {
    assert_eq!(AdversaryInput::for_dataset("adult").unwrap(), AdversaryInput::NullSamples);
    assert_eq!(AdversaryInput::for_dataset("cmnist").unwrap(), AdversaryInput::Encodings);
    assert_eq!(AdversaryInput::for_dataset("celeba").unwrap(), AdversaryInput::Encodings);
    assert!(AdversaryInput::for_dataset("census").is_err());
}

#[test]
fn ensemble_rejects_bad_settings() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    assert!(AdversaryEnsemble::new(small_spec(0, 0.1), 2, 2, 1e-3, &mut rng).is_err());
    assert!(AdversaryEnsemble::new(small_spec(2, 1.5), 2, 2, 1e-3, &mut rng).is_err());
}

#[test]
fn reparameterisation_edge_cases() {
    let mu = Array2::from_shape_vec((2, 3), vec![0.5, -1.0, 2.0, 0.0, 3.0, -0.25]).unwrap();
    let tiny = Array2::from_elem((2, 3), -50.0);
    let z = reparameterize(mu.view(), tiny.view(), &mut ChaCha8Rng::seed_from_u64(5));
    assert!((&z - &mu).iter().all(|v| v.abs() < 1e-9));

    let zeros = Array2::zeros((2, 3));
    let z = reparameterize(zeros.view(), zeros.view(), &mut ChaCha8Rng::seed_from_u64(6));
    let raw = gaussian(2, 3, &mut ChaCha8Rng::seed_from_u64(6));
    assert_eq!(z, raw);
}

#[test]
fn reparameterised_samples_have_the_posterior_moments() {
    let n = 100_000;
    let mu = Array2::from_elem((n, 1), 1.5);
    let logvar = Array2::from_elem((n, 1), (0.25f64).ln());
    let z = reparameterize(mu.view(), logvar.view(), &mut ChaCha8Rng::seed_from_u64(7));
    let mean = z.mean().unwrap();
    let var = z.mapv(|v| (v - mean).powi(2)).mean().unwrap();
    assert!((mean - 1.5).abs() < 0.01);
    assert!((var - 0.25).abs() < 0.01);
}

fn toy_config() -> CvaeConfig {
    CvaeConfig {
        input_shape: [4, 1, 1],
        latent: 2,
        s_classes: 2,
        beta: 0.01,
        recon: ReconLoss::SquaredError,
        arch: CvaeArch::Dense { hidden: 32 },
    }
}

#[test]
fn decoder_accepts_only_one_hot_or_zero_labels() {
    let model = CvaeModel::new(toy_config(), 8).unwrap();
    let z = Array2::zeros((1, 2));
    assert!(model.decode(z.view(), Array2::zeros((1, 2)).view()).is_ok());
    assert!(model.decode(z.view(), one_hot(&[1], 2).view()).is_ok());
    let half = Array2::from_elem((1, 2), 0.5);
    assert!(matches!(model.decode(z.view(), half.view()), Err(CvaeError::InvalidLabelVector { row: 0 })));
}

/// The first two features encode `s` as a colour, the rest is content. With
/// an adversary on the code, the decoder takes the colour from the label.
#[test]
fn decoder_takes_sensitive_content_from_the_label() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let draw = |n: usize, rng: &mut ChaCha8Rng| {
        let s: Vec<usize> = (0..n).map(|_| rng.random_range(0..2)).collect();
        let x = Array2::from_shape_fn((n, 4), |(i, j)| match j {
            0 => s[i] as f64,
            1 => 1.0 - s[i] as f64,
            _ => rng.random_range(-1.0..1.0),
        });
        (x, s)
    };
    let mut model = CvaeModel::new(toy_config(), 10).unwrap();
    let mut adversary = AdversaryEnsemble::new(small_spec(1, 0.0), 2, 2, 1e-3, &mut rng).unwrap();
    let mut opt = RAdam::new(3e-3);
    for _ in 0..1500 {
        let (x, s) = draw(64, &mut rng);
        model
            .train_step(x.view(), &s, Some((&mut adversary, GradientReversal::new(1.0))), &mut opt, &mut rng)
            .unwrap();
    }
    let (x, _) = draw(500, &mut rng);
    let (mu, _) = model.encode(x.view()).unwrap();
    let as_zero = model.decode(mu.view(), one_hot(&vec![0; 500], 2).view()).unwrap();
    let as_one = model.decode(mu.view(), one_hot(&vec![1; 500], 2).view()).unwrap();
    let colour = |out: &Array2<f64>| out.slice(s![.., 0]).mean().unwrap() - out.slice(s![.., 1]).mean().unwrap();
    assert!(colour(&as_one) - colour(&as_zero) > 0.4, "colour shift {}", colour(&as_one) - colour(&as_zero));
}

proptest! {
    #[test]
    fn kl_is_non_negative(values in prop::collection::vec(-5.0f64..5.0, 12)) {
        let mu = Array2::from_shape_vec((2, 3), values[..6].to_vec()).unwrap();
        let logvar = Array2::from_shape_vec((2, 3), values[6..].to_vec()).unwrap();
        prop_assert!(kl_divergence(mu.view(), logvar.view()).iter().all(|&k| k >= 0.0));
    }

    #[test]
    fn kl_matches_the_closed_form(mu in -3.0f64..3.0, logvar in -3.0f64..3.0) {
        let m = Array2::from_elem((1, 1), mu);
        let l = Array2::from_elem((1, 1), logvar);
        let kl = kl_divergence(m.view(), l.view())[0];
        let expected = 0.5 * (mu * mu + logvar.exp() - logvar - 1.0);
        prop_assert!((kl - expected).abs() < 1e-12);
    }
}
