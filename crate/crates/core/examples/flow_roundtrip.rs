//! Builds a small image flow, checks that it inverts, and draws null samples.
use ndarray::Array2;
use nullsample::flow::{FlowConfig, FlowModel};
use nullsample::invariance::{null_sample_b, null_sample_u, PartitionSpec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let config = FlowConfig { input_shape: [3, 8, 8], levels: 2, depth: 2, hidden_channels: 16, ..FlowConfig::cmnist() };
    let flow = FlowModel::new(config, 7)?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let x = Array2::from_shape_simple_fn((4, flow.dim()), || rng.random::<f64>());

    let (z, logdet) = flow.forward(x.view())?;
    let back = flow.inverse(z.view())?;
    let err = (&back - &x).iter().fold(0.0f64, |m, v| m.max(v.abs()));
    println!("{} blocks, dim {}, max round-trip error {err:.2e}", flow.num_blocks(), flow.dim());
    println!("log|det J| per row: {logdet:.4}");
    println!("nll {:.4} nats/dim", flow.nll_loss(x.view())?);

    // The trailing 48 code elements hold the sensitive part.
    let partition = PartitionSpec::new(flow.dim(), 48)?;
    let xu = null_sample_u(&flow, x.view(), &partition)?;
    let xb = null_sample_b(&flow, x.view(), &partition)?;
    println!("null samples: x_u {:?}, x_b {:?}", xu.dim(), xb.dim());
    Ok(())
}
