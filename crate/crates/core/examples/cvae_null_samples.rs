//! Trains a conditional VAE whose code is scrubbed of `s` by an adversary and
//! shows the decoder switching colour with the label.
use ndarray::{s, Array2};
use nullsample::adversary::{AdversaryEnsemble, EnsembleSpec, GradientReversal, MemberArch};
use nullsample::cvae::{one_hot, CvaeArch, CvaeConfig, CvaeModel, ReconLoss};
use nullsample::invariance::null_sample_cvae;
use nullsample_nn::RAdam;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Features 0 and 1 encode `s` as a two-channel colour.
fn draw(n: usize, rng: &mut ChaCha8Rng) -> (Array2<f64>, Vec<usize>) {
    let s: Vec<usize> = (0..n).map(|_| rng.random_range(0..2)).collect();
    let x = Array2::from_shape_fn((n, 4), |(i, j)| match j {
        0 => s[i] as f64,
        1 => 1.0 - s[i] as f64,
        _ => rng.random_range(-1.0..1.0),
    });
    (x, s)
}

fn colour(out: &Array2<f64>) -> f64 {
    out.slice(s![.., 0]).mean().unwrap() - out.slice(s![.., 1]).mean().unwrap()
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let config = CvaeConfig {
        input_shape: [4, 1, 1],
        latent: 2,
        s_classes: 2,
        beta: 0.01,
        recon: ReconLoss::SquaredError,
        arch: CvaeArch::Dense { hidden: 32 },
    };
    let mut model = CvaeModel::new(config, 10)?;
    let spec = EnsembleSpec { members: 1, reinit_probability: 0.0, arch: MemberArch::Mlp { hidden: 16 } };
    let mut adversary = AdversaryEnsemble::new(spec, 2, 2, 1e-3, &mut rng)?;
    let mut opt = RAdam::new(3e-3);
    for step in 0..1500 {
        let (x, s) = draw(64, &mut rng);
        let loss = model.train_step(x.view(), &s, Some((&mut adversary, GradientReversal::new(1.0))), &mut opt, &mut rng)?;
        if step % 300 == 0 {
            println!("step {step:>4}: recon {:.4} kl {:.4} adversary {:.4}", loss.recon, loss.kl, loss.adv);
        }
    }

    let (x, _) = draw(500, &mut rng);
    let (mu, _) = model.encode(x.view())?;
    let as_zero = model.decode(mu.view(), one_hot(&vec![0; 500], 2).view())?;
    let as_one = model.decode(mu.view(), one_hot(&vec![1; 500], 2).view())?;
    println!("colour with s=0 {:+.3}, with s=1 {:+.3}", colour(&as_zero), colour(&as_one));
    let xu = null_sample_cvae(&model, x.view())?;
    println!("null-sample colour {:+.3}", colour(&xu));
    Ok(())
}
