//! Searches for the smallest sensitive-part size that leaves a linear probe at
//! chance.
use nullsample::invariance::{tune_partition_size, PlantedTrainer, TuningOptions};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut trainer = PlantedTrainer::generate(2000, 16, 5, 1.5, 0);
    let outcome = tune_partition_size(&mut trainer, &TuningOptions::default())?;
    for step in &outcome.trace {
        println!("size {:>2}: probe {:.3} chance {:.3} invariant {}", step.zb, step.probe_accuracy, step.chance, step.invariant);
    }
    println!("chosen size {}", outcome.zb);
    Ok(())
}
