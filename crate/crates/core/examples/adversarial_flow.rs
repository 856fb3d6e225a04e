//! Trains a tabular flow with an adversary on the invariant code, then checks
//! how well a fresh probe recovers `s` from it.
use ndarray::{s, Array2, Axis};
use nullsample::adversary::{AdversaryEnsemble, AdversaryInput, EnsembleSpec, MemberArch};
use nullsample::flow::{CouplingMask, FlowConfig, FlowModel};
use nullsample::invariance::{partition, LogisticProbe, PartitionSpec, ProbeOptions};
use nullsample::pipeline::{train_flow, EncoderTraining};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn probe_accuracy(flow: &FlowModel, spec: &PartitionSpec, x: &Array2<f64>, s: &[usize]) -> f64 {
    let (z, _) = flow.forward(x.view()).unwrap();
    let (zu, _) = partition(z.view(), spec).unwrap();
    let (train, test) = zu.split_at(Axis(0), zu.nrows() / 2);
    let (s_train, s_test) = s.split_at(zu.nrows() / 2);
    LogisticProbe::fit(train, s_train, 2, &ProbeOptions::default()).unwrap().accuracy(test, s_test)
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let n = 3000;
    let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..2)).collect();
    // Coordinate 0 leaks `s`, the rest is noise.
    let x = Array2::from_shape_fn((n, 8), |(i, j)| {
        let noise: f64 = rng.sample(StandardNormal);
        if j == 0 { noise + 2.0 * labels[i] as f64 } else { noise }
    });
    let config = FlowConfig {
        input_shape: [8, 1, 1],
        levels: 1,
        depth: 2,
        hidden_channels: 16,
        kernel: 1,
        squeeze: false,
        factor_out: false,
        mask: CouplingMask::ChannelHalves,
    };
    let mut flow = FlowModel::new(config, 2)?;
    let spec = PartitionSpec::new(8, 2)?;
    println!("probe on z_u before training: {:.3}", probe_accuracy(&flow, &spec, &x, &labels));

    let ensemble_spec = EnsembleSpec { members: 3, reinit_probability: 0.2, arch: MemberArch::Mlp { hidden: 32 } };
    let mut ensemble = AdversaryEnsemble::new(ensemble_spec, spec.invariant(), 2, 1e-3, &mut rng)?;
    let options = EncoderTraining {
        epochs: 20,
        batch_size: 128,
        lr: 1e-3,
        lambda: 1.0,
        adversary_steps: 1,
        dequantize: 0.0,
        stop_on_plateau: false,
    };
    let traces = train_flow(
        &mut flow,
        &spec,
        &mut ensemble,
        AdversaryInput::Encodings,
        x.slice(s![..2400, ..]),
        &labels[..2400],
        Some((x.slice(s![2400.., ..]), &labels[2400..])),
        &options,
        &mut rng,
    )?;
    for t in traces.iter().step_by(5) {
        println!("epoch {:>2}: nll {:.3} adversary {:.3} held-out {:.3}", t.epoch, t.objective, t.adversary, t.held_out_adversary.unwrap());
    }
    println!("probe on z_u after training: {:.3}", probe_accuracy(&flow, &spec, &x, &labels));
    Ok(())
}
