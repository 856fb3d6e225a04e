//! Datasets: ingestion and caching, coloured-MNIST synthesis, biased
//! splits, representative sets and tabular pre-embedding.

mod adult;
mod bias;
mod cache;
mod celeba;
mod cmnist;
mod colour;
mod mnist;

pub use adult::{pre_embed, AdultRecord, AdultTable, FeatureSchema, PreEmbedder, PreEmbedOptions, EMBED_WIDTH};
pub use bias::{make_representative, split_biased};
pub use cache::{
    load_dataset, CacheManifest, DatasetName, FetchError, Fetcher, HttpFetcher, ManifestFile, MirrorFetcher, RawDataset,
    SourceFile,
};
pub use celeba::{prepare_celeba_subset, CelebaSubset};
pub use cmnist::{build_cmnist, downsample, pad_images, CmnistSplits, CmnistSpec};
pub use colour::{colorize, grayscale, ColourTable, COLOUR_TABLE};
pub use mnist::{parse_idx, IdxArray, MnistRaw};

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("colour noise must be non-negative, got {0}")]
    NegativeSigma(f64),
    #[error("mixing factor must lie in [0, 1], got {0}")]
    BadEta(f64),
    #[error("fraction must lie in (0, 1), got {0}")]
    BadFraction(f64),
    #[error("{what} labels must be binary, found {value}")]
    NonBinary { what: &'static str, value: usize },
    #[error("dataset has no target labels")]
    MissingLabels,
    #[error("unknown categorical level(s): {0}")]
    UnknownLevel(String),
    #[error("unknown dataset `{0}`")]
    UnknownDataset(String),
    #[error("corrupt cache: {0}")]
    CorruptCache(String),
    #[error(transparent)]
    Fetch(#[from] FetchError),
    #[error("malformed {what}: {detail}")]
    Malformed { what: String, detail: String },
    #[error("not enough records: need {needed}, have {available}")]
    NotEnoughRecords { needed: usize, available: usize },
    #[error("io error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

pub type Result<T> = std::result::Result<T, DataError>;

pub(crate) fn io_err(path: &std::path::Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io { path: path.display().to_string(), source }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Split {
    Representative,
    Train,
    Test,
    /// Not yet assigned to a role.
    Pool,
}

/// Rows of features with a sensitive label and an optional target label.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelledDataset {
    /// One example per row; images are flattened `[C, H, W]`.
    pub x: Array2<f64>,
    /// `[C, H, W]` of one example; tabular data uses `[D, 1, 1]`.
    pub shape: [usize; 3],
    pub s: Vec<usize>,
    pub y: Option<Vec<usize>>,
    pub split: Split,
    /// Position of each example in the source it was drawn from.
    pub ids: Vec<usize>,
}

impl LabelledDataset {
    pub fn new(x: Array2<f64>, shape: [usize; 3], s: Vec<usize>, y: Option<Vec<usize>>, split: Split) -> Self {
        let ids = (0..x.nrows()).collect();
        Self { x, shape, s, y, split, ids }
    }

    pub fn len(&self) -> usize {
        self.x.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.x.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.x.ncols()
    }

    pub fn s_classes(&self) -> usize {
        self.s.iter().max().map_or(0, |m| m + 1)
    }

    pub fn y_classes(&self) -> usize {
        self.y.as_ref().and_then(|y| y.iter().max()).map_or(0, |m| m + 1)
    }

    pub fn targets(&self) -> Result<&[usize]> {
        self.y.as_deref().ok_or(DataError::MissingLabels)
    }

    /// Rows at `indices`, in that order.
    pub fn select(&self, indices: &[usize], split: Split) -> Self {
        Self {
            x: self.x.select(Axis(0), indices),
            shape: self.shape,
            s: indices.iter().map(|&i| self.s[i]).collect(),
            y: self.y.as_ref().map(|y| indices.iter().map(|&i| y[i]).collect()),
            split,
            ids: indices.iter().map(|&i| self.ids[i]).collect(),
        }
    }

    /// Same examples with the target labels removed.
    pub fn without_targets(mut self) -> Self {
        self.y = None;
        self
    }
}

/// Parameters of a synthetic-bias experiment.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BiasSpec {
    pub eta: f64,
    pub sigma: f64,
    pub seed: u64,
}

impl BiasSpec {
    pub fn new(eta: f64, sigma: f64, seed: u64) -> Result<Self> {
        let spec = Self { eta, sigma, seed };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.eta) {
            return Err(DataError::BadEta(self.eta));
        }
        if self.sigma.is_nan() || self.sigma < 0.0 {
            return Err(DataError::NegativeSigma(self.sigma));
        }
        Ok(())
    }
}
