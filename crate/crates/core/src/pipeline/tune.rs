use ndarray::{s, Axis};
use serde::Serialize;

use super::config::{ExperimentConfig, ModelKind};
use super::data::{prepare_data, stream_rng, ExperimentData, Stream};
use super::train::{train_flow, EncoderTraining};
use super::{io_err, PipelineError, Result};
use crate::adversary::{AdversaryEnsemble, AdversaryInput};
use crate::data::LabelledDataset;
use crate::flow::FlowModel;
use crate::invariance::{
    tune_partition_size, InvarianceError, PartitionSpec, PartitionTrainer, ProbeData, ProbeOptions, TuningOptions,
    TuningOutcome,
};

/// Trains a fresh flow on 80% of the representative set for each candidate
/// size (stopping at a loss plateau) and returns the invariant codes of both
/// parts for probing.
pub struct FlowPartitionTrainer<'a> {
    config: &'a ExperimentConfig,
    data: &'a LabelledDataset,
    /// Training epochs run so far, across all candidates.
    pub epochs_run: usize,
}

impl<'a> FlowPartitionTrainer<'a> {
    pub fn new(config: &'a ExperimentConfig, data: &'a LabelledDataset) -> Self {
        Self { config, data, epochs_run: 0 }
    }

    fn fit(&mut self, zb: usize) -> Result<ProbeData> {
        let config = self.config;
        let mut flow = FlowModel::new(config.flow_config()?, config.seed)?;
        let partition = PartitionSpec::new(flow.dim(), zb)?;
        let source = AdversaryInput::for_dataset(config.dataset.as_str())?;
        let width = match source {
            AdversaryInput::Encodings => partition.invariant(),
            AdversaryInput::NullSamples => flow.dim(),
        };
        let classes = self.data.s_classes().max(2);
        let mut adv_rng = stream_rng(config.seed, Stream::Adversary);
        let mut train_rng = stream_rng(config.seed, Stream::Training);
        let mut ensemble =
            AdversaryEnsemble::new(config.ensemble_spec(), width, classes, config.lr.adversary, &mut adv_rng)?;
        let cut = self.data.len() * 4 / 5;
        let (x_train, x_held) = self.data.x.view().split_at(Axis(0), cut);
        let (s_train, s_held) = self.data.s.split_at(cut);
        let options = EncoderTraining {
            epochs: config.epochs,
            batch_size: config.batch_size,
            lr: config.lr.encoder,
            lambda: config.lambda,
            adversary_steps: config.adversary_steps,
            dequantize: config.dequantize,
            stop_on_plateau: true,
        };
        let traces =
            train_flow(&mut flow, &partition, &mut ensemble, source, x_train, s_train, None, &options, &mut train_rng)?;
        self.epochs_run += traces.len();
        let du = partition.invariant();
        let codes = |x| -> Result<_> { Ok(flow.forward(x)?.0.slice(s![.., ..du]).to_owned()) };
        Ok(ProbeData {
            train: codes(x_train)?,
            train_s: s_train.to_vec(),
            held_out: codes(x_held)?,
            held_out_s: s_held.to_vec(),
        })
    }
}

impl PartitionTrainer for FlowPartitionTrainer<'_> {
    fn code_dim(&self) -> usize {
        self.config.input_shape().iter().product()
    }

    fn train(&mut self, zb: usize) -> std::result::Result<ProbeData, InvarianceError> {
        self.fit(zb).map_err(|e| match e {
            PipelineError::Invariance(inner) => inner,
            other => InvarianceError::Trainer(other.to_string()),
        })
    }
}

#[derive(Serialize)]
struct TuningReport<'a> {
    config: String,
    outcome: Option<&'a TuningOutcome>,
    error: Option<String>,
}

/// Searches for the smallest sensitive-part size of a flow encoder and writes
/// `tuning.json` under `out_dir/tune-<run-id>/`, also on failure.
pub fn run_tune(config: &ExperimentConfig, data: Option<&ExperimentData>) -> Result<TuningOutcome> {
    config.validate()?;
    if config.model != ModelKind::Cflow {
        return Err(PipelineError::Config("partition tuning needs the cflow model".into()));
    }
    let owned;
    let data = match data {
        Some(d) => d,
        None => {
            owned = prepare_data(config)?;
            &owned
        }
    };
    let mut trainer = FlowPartitionTrainer::new(config, &data.representative);
    let options = TuningOptions { probe: ProbeOptions { seed: config.seed, ..ProbeOptions::default() }, ..Default::default() };
    let result = tune_partition_size(&mut trainer, &options);
    let report = TuningReport {
        config: config.to_toml(),
        outcome: result.as_ref().ok(),
        error: result.as_ref().err().map(|e| e.to_string()),
    };
    let dir = config.out_dir.join(format!("tune-{}", config.run_id()));
    std::fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    let path = dir.join("tuning.json");
    std::fs::write(&path, serde_json::to_string_pretty(&report).expect("serialisable")).map_err(io_err(&path))?;
    Ok(result?)
}
