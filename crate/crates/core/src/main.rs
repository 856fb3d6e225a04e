use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use nullsample::pipeline::{
    emit_report, run_phase1, run_phase2, run_sweep, run_tune, DatasetKind, ExperimentConfig, ModelKind,
    PipelineError, SweepAxis,
};
use nullsample::pipeline::report::collect_records;

#[derive(Parser)]
#[command(name = "nullsample", version, about = "Train invariant encoders and evaluate them on biased data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train an encoder on the representative set.
    Phase1(ConfigArgs),
    /// Train and evaluate a downstream classifier or baseline.
    Phase2(ConfigArgs),
    /// Run phase 1 and 2 for each value along one axis.
    Sweep {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, value_parser = ["eta", "sigma", "zb"])]
        axis: String,
        /// Comma-separated axis values.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
    },
    /// Collect every run under a directory into CSV, JSON and a plot.
    Report {
        /// Directory holding run directories.
        #[arg(long, default_value = "runs")]
        runs_dir: PathBuf,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Search for the smallest sensitive-part size of a flow.
    TuneZb(ConfigArgs),
}

/// Flags override values from `--config`.
#[derive(Args)]
struct ConfigArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum)]
    dataset: Option<DatasetKind>,
    #[arg(long, value_enum)]
    model: Option<ModelKind>,
    #[arg(long)]
    eta: Option<f64>,
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long)]
    zb_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    cache_dir: Option<PathBuf>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long)]
    mirror_dir: Option<PathBuf>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<ExperimentConfig, PipelineError> {
        let mut c = match &self.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => ExperimentConfig::default(),
        };
        macro_rules! set {
            ($($field:ident => $target:expr),* $(,)?) => {
                $(if let Some(v) = self.$field.clone() { $target = v; })*
            };
        }
        set!(
            dataset => c.dataset,
            model => c.model,
            eta => c.eta,
            sigma => c.sigma,
            seed => c.seed,
            epochs => c.epochs,
            batch_size => c.batch_size,
            lambda => c.lambda,
            cache_dir => c.cache_dir,
            out_dir => c.out_dir,
        );
        if self.zb_size.is_some() {
            c.zb_size = self.zb_size;
        }
        if self.beta.is_some() {
            c.beta = self.beta;
        }
        if self.mirror_dir.is_some() {
            c.mirror_dir = self.mirror_dir.clone();
        }
        c.validate()?;
        Ok(c)
    }
}

fn print_json<T: serde::Serialize>(value: &T) {
    println!("{}", serde_json::to_string_pretty(value).expect("serialisable"));
}

fn run(cli: Cli) -> Result<(), PipelineError> {
    match cli.command {
        Command::Phase1(args) => print_json(&run_phase1(&args.resolve()?, None)?),
        Command::Phase2(args) => println!("{}", run_phase2(&args.resolve()?, None)?.report.to_json()),
        Command::Sweep { config, axis, values } => {
            let config = config.resolve()?;
            let axis = match axis.as_str() {
                "eta" => SweepAxis::Eta(values),
                "sigma" => SweepAxis::Sigma(values),
                _ => SweepAxis::Zb(values.iter().map(|v| *v as usize).collect()),
            };
            let outcome = run_sweep(&config, &axis)?;
            for (value, error) in &outcome.failures {
                eprintln!("{} = {value} failed: {error}", outcome.axis);
            }
            print_json(&outcome.records.iter().map(|r| &r.report).collect::<Vec<_>>());
        }
        Command::Report { runs_dir, out_dir } => {
            let records = collect_records(&runs_dir)?;
            let files = emit_report(&records, out_dir.as_deref().unwrap_or(&runs_dir))?;
            println!("{}\n{}\n{}", files.csv.display(), files.index.display(), files.plot.display());
        }
        Command::TuneZb(args) => print_json(&run_tune(&args.resolve()?, None)?),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
