//! Runs both training phases on Adult over an eta sweep and writes the report.
//!
//! ```text
//! cargo run --example experiment_pipeline -- /path/to/mirror out/
//! ```
use std::path::PathBuf;

use nullsample::pipeline::report::collect_records;
use nullsample::pipeline::{emit_report, run_sweep, DatasetKind, ExperimentConfig, SweepAxis};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    env_logger::init();
    let mut args = std::env::args().skip(1);
    let mirror_dir = args.next().map(PathBuf::from);
    let out_dir = PathBuf::from(args.next().unwrap_or_else(|| "runs/example".into()));
    let config = ExperimentConfig { dataset: DatasetKind::Adult, epochs: 3, downstream_epochs: 3, mirror_dir, out_dir, ..Default::default() };

    let outcome = run_sweep(&config, &SweepAxis::Eta(vec![0.0, 0.5, 1.0]))?;
    for record in &outcome.records {
        let eta = record.experiment_config()?.eta;
        let r = &record.report;
        println!("eta {eta:.1}: acc {:.3} dp {:?} mi {:.3}", r.accuracy, r.dp_diff, r.mi_sy);
    }
    let files = emit_report(&collect_records(&config.out_dir)?, &config.out_dir.join("report"))?;
    println!("wrote {} and {}", files.csv.display(), files.plot.display());
    Ok(())
}
