use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::classifier::{Classifier, ClassifierArch, TrainOptions};
use super::config::{DatasetKind, ExperimentConfig, ModelKind, Representation};
use super::data::{prepare_data, stream_rng, ExperimentData, Stream};
use super::train::{train_cvae, train_flow, EncoderTraining, EpochTrace};
use super::{io_err, PipelineError, Result};
use crate::adversary::{AdversaryEnsemble, AdversaryInput};
use crate::checkpoint::{load_cvae, load_flow, save_cvae, save_flow};
use crate::cvae::{CvaeArch, CvaeConfig, CvaeModel, ReconLoss};
use crate::data::{grayscale, LabelledDataset};
use crate::flow::FlowModel;
use crate::invariance::{encode_dataset, Encoder, PartitionSpec};
use crate::metrics::{accuracy, FairnessReport};

const CHECKPOINT_FILE: &str = "encoder.safetensors";

/// Result of encoder training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Phase1Outcome {
    pub encoder_id: String,
    pub checkpoint: PathBuf,
    pub traces: Vec<EpochTrace>,
    pub wall_clock_secs: f64,
}

/// Everything recorded about one evaluated run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run_id: String,
    /// Serialised configuration the run was produced from.
    pub config: String,
    pub encoder_id: Option<String>,
    pub checkpoint: Option<PathBuf>,
    /// sha256 of the encoder checkpoint, identical before and after
    /// downstream training.
    pub checkpoint_sha256: Option<String>,
    pub downstream_losses: Vec<f64>,
    pub train_accuracy: f64,
    pub report: FairnessReport,
    pub wall_clock_secs: f64,
}

impl RunRecord {
    pub fn experiment_config(&self) -> Result<ExperimentConfig> {
        ExperimentConfig::from_toml(&self.config)
    }
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    std::fs::write(path, text).map_err(io_err(path))
}

fn file_sha256(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

pub fn checkpoint_path(config: &ExperimentConfig) -> PathBuf {
    config.out_dir.join(config.encoder_id()).join(CHECKPOINT_FILE)
}

fn cvae_config(config: &ExperimentConfig, data: &ExperimentData, s_classes: usize) -> CvaeConfig {
    let mut c = match (config.dataset, &data.raw) {
        (DatasetKind::Adult, Some(raw)) => CvaeConfig::adult(raw.representative.dim(), raw.categorical.clone()),
        (DatasetKind::Adult, None) => CvaeConfig {
            recon: ReconLoss::SquaredError,
            ..CvaeConfig::adult(data.representative.dim(), Vec::new())
        },
        (DatasetKind::Cmnist, _) => CvaeConfig::cmnist(),
        (DatasetKind::Celeba, _) => CvaeConfig::celeba(),
    };
    if config.dataset.is_image() {
        c.input_shape = config.input_shape();
        let side = c.input_shape[1];
        let levels = (side.trailing_zeros() as usize).saturating_sub(1).clamp(1, 4);
        c.arch = CvaeArch::Conv { base_channels: 32, levels };
    }
    c.s_classes = s_classes;
    c.beta = config.beta_value();
    if let Some(latent) = config.latent {
        c.latent = latent;
    }
    c
}

fn s_classes(data: &ExperimentData) -> usize {
    [&data.representative, &data.train, &data.test].iter().map(|d| d.s_classes()).max().unwrap_or(2).max(2)
}

fn encoder_training(config: &ExperimentConfig) -> EncoderTraining {
    EncoderTraining {
        epochs: config.epochs,
        batch_size: config.batch_size,
        lr: config.lr.encoder,
        lambda: config.lambda,
        adversary_steps: config.adversary_steps,
        dequantize: config.dequantize,
        stop_on_plateau: false,
    }
}

/// Trains the configured encoder on the representative set and writes
/// `out_dir/<encoder-id>/encoder.safetensors` plus its loss traces.
pub fn run_phase1(config: &ExperimentConfig, data: Option<&ExperimentData>) -> Result<Phase1Outcome> {
    config.validate()?;
    if !config.model.has_encoder() {
        return Err(PipelineError::Config(format!("{} has no encoder to train", config.model.as_str())));
    }
    let start = Instant::now();
    let owned;
    let data = match data {
        Some(d) => d,
        None => {
            owned = prepare_data(config)?;
            &owned
        }
    };
    let classes = s_classes(data);
    let mut train_rng = stream_rng(config.seed, Stream::Training);
    let mut adv_rng = stream_rng(config.seed, Stream::Adversary);
    let options = encoder_training(config);
    let spec = config.ensemble_spec();
    let path = checkpoint_path(config);
    let traces = match config.model {
        ModelKind::Cflow => {
            let flow_config = config.flow_config()?;
            let mut flow = FlowModel::new(flow_config, config.seed)?;
            let partition = PartitionSpec::new(flow.dim(), config.zb())?;
            let source = AdversaryInput::for_dataset(config.dataset.as_str())?;
            let width = match source {
                AdversaryInput::Encodings => partition.invariant(),
                AdversaryInput::NullSamples => flow.dim(),
            };
            let mut ensemble = AdversaryEnsemble::new(spec, width, classes, config.lr.adversary, &mut adv_rng)?;
            let rep = &data.representative;
            let traces =
                train_flow(&mut flow, &partition, &mut ensemble, source, rep.x.view(), &rep.s, None, &options, &mut train_rng)?;
            save_flow(&path, &flow, &partition)?;
            traces
        }
        ModelKind::Cvae => {
            let (rep, _, _) = data.raw_splits();
            let mut cvae = CvaeModel::new(cvae_config(config, data, classes), config.seed)?;
            let mut ensemble =
                AdversaryEnsemble::new(spec, cvae.latent_dim(), classes, config.lr.adversary, &mut adv_rng)?;
            let traces = train_cvae(&mut cvae, &mut ensemble, rep.x.view(), &rep.s, None, &options, &mut train_rng)?;
            save_cvae(&path, &cvae)?;
            traces
        }
        _ => unreachable!("checked above"),
    };
    let outcome = Phase1Outcome {
        encoder_id: config.encoder_id(),
        checkpoint: path.clone(),
        traces,
        wall_clock_secs: start.elapsed().as_secs_f64(),
    };
    let dir = path.parent().expect("checkpoint has a directory");
    write(&dir.join("config.toml"), &config.to_toml())?;
    write(&dir.join("phase1.json"), &serde_json::to_string_pretty(&outcome).expect("serialisable"))?;
    Ok(outcome)
}

fn image_cnn(shape: [usize; 3]) -> ClassifierArch {
    let levels = if shape[1] > 16 { 3 } else { 2 };
    ClassifierArch::Cnn { input: shape, filters: 16, levels }
}

/// Inputs and classifier for the downstream stage of an encoder run.
struct Downstream {
    train: Array2<f64>,
    test: Array2<f64>,
    arch: ClassifierArch,
    checkpoint: PathBuf,
}

fn encode_splits(config: &ExperimentConfig, data: &ExperimentData) -> Result<Downstream> {
    let path = checkpoint_path(config);
    if !path.exists() {
        return Err(PipelineError::MissingCheckpoint(path));
    }
    let representation = config.representation_kind();
    let run_dir = config.out_dir.join(config.run_id());
    let encode = |encoder: Encoder<'_>, d: &LabelledDataset, name: &str| {
        // Only the features reach the encoder; labels are attached for the
        // persisted copy.
        let dir = run_dir.join("encoded").join(name);
        encode_dataset(encoder, d.x.view(), d.shape, &d.s, d.y.as_deref(), Some(&dir))
    };
    let (train, test, shape) = match config.model {
        ModelKind::Cflow => {
            let (flow, partition) = load_flow(&path, Some(config.input_shape()))?;
            let encoder = Encoder::Flow { model: &flow, partition };
            (encode(encoder, &data.train, "train")?, encode(encoder, &data.test, "test")?, data.train.shape)
        }
        ModelKind::Cvae => {
            let (_, train, test) = data.raw_splits();
            let cvae = load_cvae(&path, Some(train.shape))?;
            let encoder = Encoder::Cvae(&cvae);
            (encode(encoder, train, "train")?, encode(encoder, test, "test")?, train.shape)
        }
        _ => unreachable!("encoder models only"),
    };
    let (train, test, arch) = match (representation, config.dataset.is_image()) {
        (_, false) => {
            let pick = |e: crate::invariance::EncodedDataset| match representation {
                Representation::Codes => e.codes,
                Representation::NullSamples => e.null_samples,
            };
            (pick(train), pick(test), ClassifierArch::Logistic)
        }
        (Representation::Codes, true) => (train.codes, test.codes, ClassifierArch::Mlp { hidden: 256 }),
        (Representation::NullSamples, true) => (train.null_samples, test.null_samples, image_cnn(shape)),
    };
    Ok(Downstream { train, test, arch, checkpoint: path })
}

/// Trains and evaluates the downstream classifier (or a baseline) and writes
/// `report.json`, `record.json` and `config.toml` under `out_dir/<run-id>/`.
///
/// Encoder runs need the checkpoint from [`run_phase1`]; the checkpoint is
/// only read.
pub fn run_phase2(config: &ExperimentConfig, data: Option<&ExperimentData>) -> Result<RunRecord> {
    config.validate()?;
    let start = Instant::now();
    let owned;
    let data = match data {
        Some(d) => d,
        None => {
            owned = prepare_data(config)?;
            &owned
        }
    };
    let mut rng = stream_rng(config.seed, Stream::Downstream);
    let (_, base_train, base_test) = data.raw_splits();
    let y_train = base_train.targets()?;
    let y_test = base_test.targets()?;
    let classes = base_train.y_classes().max(base_test.y_classes()).max(2);
    let options = TrainOptions { epochs: config.downstream_epochs, batch_size: config.batch_size, lr: config.lr.classifier };
    let image = config.dataset.is_image();

    let (mut classifier, train_x, test_x, checkpoint, checksum) = if config.model.has_encoder() {
        let before = file_sha256(&checkpoint_path(config)).ok();
        let d = encode_splits(config, data)?;
        let classifier = Classifier::new(d.arch, d.train.ncols(), classes, &mut rng);
        (classifier, d.train, d.test, Some(d.checkpoint), before)
    } else {
        let (train_x, test_x, arch) = match config.model {
            ModelKind::BaselineCnn | ModelKind::BaselineEntropy if image => {
                (base_train.x.clone(), base_test.x.clone(), image_cnn(base_train.shape))
            }
            ModelKind::BaselineGray => {
                let [c, h, w] = base_train.shape;
                (
                    grayscale(base_train.x.view(), c),
                    grayscale(base_test.x.view(), c),
                    image_cnn([1, h, w]),
                )
            }
            _ => (base_train.x.clone(), base_test.x.clone(), ClassifierArch::Mlp { hidden: 256 }),
        };
        let classifier = Classifier::new(arch, train_x.ncols(), classes, &mut rng);
        (classifier, train_x, test_x, None, None)
    };

    let losses = if config.model == ModelKind::BaselineEntropy {
        let s_classes = base_train.s_classes().max(2);
        classifier.fit_with_entropy_penalty(
            train_x.view(),
            y_train,
            &base_train.s,
            s_classes,
            config.entropy_weight,
            &options,
            &mut rng,
        )?
    } else {
        classifier.fit(train_x.view(), y_train, &options, &mut rng)?
    };
    if losses.iter().any(|l| !l.is_finite()) {
        return Err(PipelineError::Divergence { epoch: losses.len(), detail: "non-finite downstream loss".into() });
    }
    let train_accuracy = accuracy(&classifier.predict(train_x.view()), y_train)?;
    let preds = classifier.predict(test_x.view());
    let report = FairnessReport::evaluate(&preds, y_test, &base_test.s)?;

    if let (Some(path), Some(before)) = (&checkpoint, &checksum) {
        if &file_sha256(path)? != before {
            return Err(PipelineError::EncoderModified);
        }
    }
    let record = RunRecord {
        run_id: config.run_id(),
        config: config.to_toml(),
        encoder_id: config.model.has_encoder().then(|| config.encoder_id()),
        checkpoint,
        checkpoint_sha256: checksum,
        downstream_losses: losses,
        train_accuracy,
        report,
        wall_clock_secs: start.elapsed().as_secs_f64(),
    };
    let dir = config.out_dir.join(&record.run_id);
    write(&dir.join("report.json"), &record.report.to_json())?;
    write(&dir.join("record.json"), &serde_json::to_string_pretty(&record).expect("serialisable"))?;
    write(&dir.join("config.toml"), &record.config)?;
    log::info!(
        "{}: train accuracy {:.3}, test accuracy {:.3}",
        record.run_id,
        record.train_accuracy,
        record.report.accuracy
    );
    Ok(record)
}

/// Values swept over, one run each.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "axis", content = "values")]
pub enum SweepAxis {
    Eta(Vec<f64>),
    Sigma(Vec<f64>),
    Zb(Vec<usize>),
}

impl SweepAxis {
    pub fn len(&self) -> usize {
        match self {
            Self::Eta(v) | Self::Sigma(v) => v.len(),
            Self::Zb(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Eta(_) => "eta",
            Self::Sigma(_) => "sigma",
            Self::Zb(_) => "zb",
        }
    }

    fn configs(&self, template: &ExperimentConfig) -> Vec<(f64, ExperimentConfig)> {
        match self {
            Self::Eta(v) => v.iter().map(|&e| (e, ExperimentConfig { eta: e, ..template.clone() })).collect(),
            Self::Sigma(v) => v.iter().map(|&s| (s, ExperimentConfig { sigma: s, ..template.clone() })).collect(),
            Self::Zb(v) => {
                v.iter().map(|&z| (z as f64, ExperimentConfig { zb_size: Some(z), ..template.clone() })).collect()
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepOutcome {
    pub axis: String,
    pub records: Vec<RunRecord>,
    /// Axis values whose run failed, with the error.
    pub failures: Vec<(f64, String)>,
    /// Encoder checkpoints trained by the sweep.
    pub encoders: Vec<String>,
}

/// Runs the template once per axis value. Along the mixing-factor axis the
/// encoder is trained once and shared, since the representative set does
/// not depend on it. A failing run is recorded and the sweep continues.
pub fn run_sweep(template: &ExperimentConfig, axis: &SweepAxis) -> Result<SweepOutcome> {
    if axis.is_empty() {
        return Err(PipelineError::Config(format!("sweep over {} has no values", axis.name())));
    }
    template.validate()?;
    let mut outcome =
        SweepOutcome { axis: axis.name().into(), records: Vec::new(), failures: Vec::new(), encoders: Vec::new() };
    let shared = matches!(axis, SweepAxis::Eta(_)) && template.model.has_encoder();
    if shared {
        let phase1 = run_phase1(template, None)?;
        outcome.encoders.push(phase1.encoder_id);
    }
    for (value, config) in axis.configs(template) {
        let result = (|| {
            config.validate()?;
            let data = prepare_data(&config)?;
            if config.model.has_encoder() && !shared {
                let phase1 = run_phase1(&config, Some(&data))?;
                outcome.encoders.push(phase1.encoder_id);
            }
            run_phase2(&config, Some(&data))
        })();
        match result {
            Ok(record) => outcome.records.push(record),
            Err(e) => {
                log::warn!("{} = {value} failed: {e}", axis.name());
                outcome.failures.push((value, e.to_string()));
            }
        }
    }
    let dir = template.out_dir.join(format!("sweep-{}-{}", axis.name(), template.run_id()));
    write(&dir.join("sweep.json"), &serde_json::to_string_pretty(&outcome).expect("serialisable"))?;
    Ok(outcome)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_axis_is_rejected() {
        let config = ExperimentConfig::default();
        assert!(matches!(run_sweep(&config, &SweepAxis::Eta(vec![])), Err(PipelineError::Config(_))));
    }
}
