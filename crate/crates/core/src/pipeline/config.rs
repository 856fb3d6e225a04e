use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{PipelineError, Result};
use crate::adversary::EnsembleSpec;
use crate::data::{CmnistSpec, PreEmbedOptions};
use crate::flow::FlowConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetKind {
    Cmnist,
    Adult,
    Celeba,
}

impl DatasetKind {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Cmnist => "cmnist",
            Self::Adult => "adult",
            Self::Celeba => "celeba",
        }
    }

    pub fn is_image(self) -> bool {
        !matches!(self, Self::Adult)
    }
}

/// What a run trains.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    Cflow,
    Cvae,
    /// Convolutional classifier on the raw images.
    BaselineCnn,
    /// Fully connected classifier on the raw features.
    BaselineMlp,
    /// Convolutional classifier on grayscale images.
    BaselineGray,
    /// Raw-input classifier whose features are pushed to carry no
    /// information about `s` through an entropy penalty.
    BaselineEntropy,
}

impl ModelKind {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Cflow => "cflow",
            Self::Cvae => "cvae",
            Self::BaselineCnn => "baseline-cnn",
            Self::BaselineMlp => "baseline-mlp",
            Self::BaselineGray => "baseline-gray",
            Self::BaselineEntropy => "baseline-entropy",
        }
    }

    /// Whether the run has a separate encoder-training phase.
    pub fn has_encoder(self) -> bool {
        matches!(self, Self::Cflow | Self::Cvae)
    }
}

/// Which output of the encoder the downstream classifier consumes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Representation {
    /// Invariant code `z_u`.
    Codes,
    /// Data-domain null-samples `x_u`.
    NullSamples,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LearningRates {
    pub encoder: f64,
    pub adversary: f64,
    pub classifier: f64,
}

impl Default for LearningRates {
    fn default() -> Self {
        Self { encoder: 3e-4, adversary: 3e-4, classifier: 1e-3 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdultOptions {
    /// Share of the pooled records used as the representative set.
    pub representative_fraction: f64,
    pub pre_embed: PreEmbedOptions,
}

impl Default for AdultOptions {
    fn default() -> Self {
        Self { representative_fraction: 0.3, pre_embed: PreEmbedOptions::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CelebaOptions {
    pub count: usize,
    pub side: usize,
    pub sensitive: String,
    pub target: String,
    pub representative_fraction: f64,
}

impl Default for CelebaOptions {
    fn default() -> Self {
        Self {
            count: 20_000,
            side: 32,
            sensitive: "Male".into(),
            target: "Smiling".into(),
            representative_fraction: 0.3,
        }
    }
}

/// One experiment. Every field has a default, so a config file only needs
/// the values that differ; unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub dataset: DatasetKind,
    pub model: ModelKind,
    /// Share of `s != y` records in the biased training set (tabular and
    /// face data).
    pub eta: f64,
    /// Colour noise of coloured MNIST.
    pub sigma: f64,
    /// Size of the sensitive part of a flow code; dataset default if unset.
    pub zb_size: Option<usize>,
    /// cVAE latent width; dataset default if unset.
    pub latent: Option<usize>,
    pub seed: u64,
    /// Encoder-training epochs.
    pub epochs: usize,
    /// Downstream (and baseline) training epochs.
    pub downstream_epochs: usize,
    pub batch_size: usize,
    /// Weight of the reversed adversary gradient.
    pub lambda: f64,
    /// Extra adversary-only updates per flow batch, on the detached
    /// representation.
    pub adversary_steps: usize,
    /// cVAE KL weight; dataset default if unset.
    pub beta: Option<f64>,
    /// Adversary ensemble; dataset default if unset.
    pub ensemble: Option<EnsembleSpec>,
    pub lr: LearningRates,
    /// Downstream input; dataset default if unset.
    pub representation: Option<Representation>,
    /// Amplitude of uniform noise added to flow inputs during training.
    pub dequantize: f64,
    /// Weight of the entropy penalty of `baseline-entropy`.
    pub entropy_weight: f64,
    /// Flow architecture; dataset default if unset.
    pub flow: Option<FlowConfig>,
    pub cmnist: CmnistSpec,
    pub adult: AdultOptions,
    pub celeba: CelebaOptions,
    pub cache_dir: PathBuf,
    /// Local copy of the raw files, consulted before downloading.
    pub mirror_dir: Option<PathBuf>,
    pub out_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetKind::Cmnist,
            model: ModelKind::Cflow,
            eta: 0.0,
            sigma: 0.0,
            zb_size: None,
            latent: None,
            seed: 0,
            epochs: 10,
            downstream_epochs: 10,
            batch_size: 128,
            lambda: 1.0,
            adversary_steps: 0,
            beta: None,
            ensemble: None,
            lr: LearningRates::default(),
            representation: None,
            dequantize: 0.0,
            entropy_weight: 1.0,
            flow: None,
            cmnist: CmnistSpec { side: 16, ..CmnistSpec::default() },
            adult: AdultOptions::default(),
            celeba: CelebaOptions::default(),
            cache_dir: PathBuf::from("cache"),
            mirror_dir: None,
            out_dir: PathBuf::from("runs"),
        }
    }
}

fn config_err(message: impl Into<String>) -> PipelineError {
    PipelineError::Config(message.into())
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let config: Self = toml::from_str(text).map_err(|e| config_err(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| config_err(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.eta) {
            return Err(config_err(format!("eta must lie in [0, 1], got {}", self.eta)));
        }
        if self.sigma.is_nan() || self.sigma < 0.0 {
            return Err(config_err(format!("sigma must be non-negative, got {}", self.sigma)));
        }
        if self.batch_size == 0 {
            return Err(config_err("batch_size must be positive"));
        }
        if self.beta.is_some_and(|b| b.is_nan() || b < 0.0) {
            return Err(config_err("beta must be non-negative"));
        }
        if self.lambda.is_nan() || self.lambda < 0.0 {
            return Err(config_err("lambda must be non-negative"));
        }
        if let Some(e) = &self.ensemble {
            if e.members == 0 || !(0.0..=1.0).contains(&e.reinit_probability) {
                return Err(config_err("ensemble needs members and a reinit probability in [0, 1]"));
            }
        }
        let image_only = matches!(self.model, ModelKind::BaselineCnn | ModelKind::BaselineGray);
        if image_only && !self.dataset.is_image() {
            return Err(config_err(format!("{} needs an image dataset", self.model.as_str())));
        }
        if let Some(flow) = &self.flow {
            flow.validate().map_err(|e| config_err(e.to_string()))?;
        }
        if let (Some(zb), Some(flow)) = (self.zb_size, self.flow_config().ok()) {
            if zb == 0 || zb >= flow.input_dim() {
                return Err(config_err(format!("zb_size {zb} must lie in [1, {})", flow.input_dim())));
            }
        }
        Ok(())
    }

    /// `[C, H, W]` of one encoder input.
    pub fn input_shape(&self) -> [usize; 3] {
        match self.dataset {
            DatasetKind::Cmnist => [3, self.cmnist.side, self.cmnist.side],
            DatasetKind::Adult => [self.adult.pre_embed.width, 1, 1],
            DatasetKind::Celeba => [3, self.celeba.side, self.celeba.side],
        }
    }

    pub fn flow_config(&self) -> Result<FlowConfig> {
        let flow = match (&self.flow, self.dataset) {
            (Some(f), _) => f.clone(),
            (None, DatasetKind::Adult) => FlowConfig { input_shape: self.input_shape(), ..FlowConfig::adult() },
            (None, _) => FlowConfig { input_shape: self.input_shape(), ..FlowConfig::cmnist_desk() },
        };
        if flow.input_shape != self.input_shape() {
            return Err(config_err(format!(
                "flow input shape {:?} does not match data shape {:?}",
                flow.input_shape,
                self.input_shape()
            )));
        }
        Ok(flow)
    }

    pub fn zb(&self) -> usize {
        self.zb_size.unwrap_or_else(|| match self.dataset {
            DatasetKind::Adult => 8,
            DatasetKind::Cmnist | DatasetKind::Celeba => self.input_shape().iter().product::<usize>() / 3,
        })
    }

    pub fn beta_value(&self) -> f64 {
        self.beta.unwrap_or(match self.dataset {
            DatasetKind::Adult => 0.0,
            DatasetKind::Cmnist => 0.01,
            DatasetKind::Celeba => 1.0,
        })
    }

    pub fn ensemble_spec(&self) -> EnsembleSpec {
        self.ensemble.unwrap_or(match self.dataset {
            DatasetKind::Adult => EnsembleSpec::adult(),
            DatasetKind::Cmnist => EnsembleSpec::cmnist(),
            DatasetKind::Celeba => EnsembleSpec::celeba(),
        })
    }

    pub fn representation_kind(&self) -> Representation {
        self.representation.unwrap_or(match self.dataset {
            DatasetKind::Adult => Representation::NullSamples,
            _ => Representation::Codes,
        })
    }

    /// Identifier of the encoder this config trains: equal for configs that
    /// differ only in downstream settings or the mixing factor.
    pub fn encoder_id(&self) -> String {
        let mut encoder_view = self.clone();
        encoder_view.eta = 0.0;
        encoder_view.downstream_epochs = 0;
        encoder_view.representation = None;
        encoder_view.entropy_weight = 0.0;
        encoder_view.lr.classifier = 0.0;
        encoder_view.out_dir = PathBuf::new();
        encoder_view.cache_dir = PathBuf::new();
        encoder_view.mirror_dir = None;
        format!("{}-{}-encoder-{}", self.dataset.as_str(), self.model.as_str(), short_hash(&encoder_view.to_toml()))
    }

    /// Identifier of a full run.
    pub fn run_id(&self) -> String {
        let mut view = self.clone();
        view.out_dir = PathBuf::new();
        view.cache_dir = PathBuf::new();
        view.mirror_dir = None;
        format!(
            "{}-{}-eta{}-sigma{}-seed{}-{}",
            self.dataset.as_str(),
            self.model.as_str(),
            self.eta,
            self.sigma,
            self.seed,
            short_hash(&view.to_toml())
        )
    }
}

fn short_hash(text: &str) -> String {
    hex::encode(&Sha256::digest(text.as_bytes())[..4])
}
