//! Splitting codes into invariant and sensitive parts, null-sampling, and
//! choosing how large the sensitive part must be.

use std::path::{Path, PathBuf};

use ndarray::{concatenate, s, Array1, Array2, ArrayView2, Axis};
use nullsample_nn::init::Init;
use nullsample_nn::layers::Dense;
use nullsample_nn::loss::{argmax_rows, softmax_cross_entropy};
use nullsample_nn::{NnError, RAdam};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cvae::{one_hot, CvaeError, CvaeModel};
use crate::flow::{FlowError, FlowModel};

#[derive(Debug, Error)]
pub enum InvarianceError {
    #[error("sensitive part of size {zb} must be smaller than the code ({total})")]
    PartitionTooLarge { zb: usize, total: usize },
    #[error("code has {got} features, partition expects {expected}")]
    WidthMismatch { expected: usize, got: usize },
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error(transparent)]
    Cvae(#[from] CvaeError),
    #[error(transparent)]
    Probe(#[from] NnError),
    #[error("io error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("bad encoding manifest: {0}")]
    Manifest(String),
    #[error("no sensitive-part size in [1, {max}] brings the probe to chance; trace: {trace:?}")]
    SearchExhausted { max: usize, trace: Vec<TuningStep> },
    #[error("partition trainer failed: {0}")]
    Trainer(String),
}

pub type Result<T> = std::result::Result<T, InvarianceError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> InvarianceError + '_ {
    move |source| InvarianceError::Io { path: path.to_path_buf(), source }
}

/// Code of width `total` whose trailing `zb` entries form the sensitive part.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartitionSpec {
    total: usize,
    zb: usize,
}

impl PartitionSpec {
    pub fn new(total: usize, zb: usize) -> Result<Self> {
        if zb >= total {
            return Err(InvarianceError::PartitionTooLarge { zb, total });
        }
        Ok(Self { total, zb })
    }

    pub fn total(&self) -> usize {
        self.total
    }

    pub fn sensitive(&self) -> usize {
        self.zb
    }

    pub fn invariant(&self) -> usize {
        self.total - self.zb
    }

    fn check(&self, z: ArrayView2<f64>) -> Result<()> {
        if z.ncols() != self.total {
            return Err(InvarianceError::WidthMismatch { expected: self.total, got: z.ncols() });
        }
        Ok(())
    }
}

/// `(z_u, z_b)` views of a batch of codes.
pub fn partition<'a>(z: ArrayView2<'a, f64>, spec: &PartitionSpec) -> Result<(ArrayView2<'a, f64>, ArrayView2<'a, f64>)> {
    spec.check(z)?;
    Ok(z.split_at(Axis(1), spec.invariant()))
}

/// Code with the sensitive part zeroed.
pub fn mask_sensitive(z: ArrayView2<f64>, spec: &PartitionSpec) -> Result<Array2<f64>> {
    spec.check(z)?;
    let mut out = z.to_owned();
    out.slice_mut(s![.., spec.invariant()..]).fill(0.0);
    Ok(out)
}

/// Code with the invariant part zeroed.
pub fn mask_invariant(z: ArrayView2<f64>, spec: &PartitionSpec) -> Result<Array2<f64>> {
    spec.check(z)?;
    let mut out = z.to_owned();
    out.slice_mut(s![.., ..spec.invariant()]).fill(0.0);
    Ok(out)
}

/// Data-space image of `[z_u, 0]`: the input with its sensitive content
/// removed.
pub fn null_sample_u(flow: &FlowModel, x: ArrayView2<f64>, spec: &PartitionSpec) -> Result<Array2<f64>> {
    let (z, _) = flow.forward(x)?;
    Ok(flow.inverse(mask_sensitive(z.view(), spec)?.view())?)
}

/// Data-space image of `[0, z_b]`: only the sensitive content.
pub fn null_sample_b(flow: &FlowModel, x: ArrayView2<f64>, spec: &PartitionSpec) -> Result<Array2<f64>> {
    let (z, _) = flow.forward(x)?;
    Ok(flow.inverse(mask_invariant(z.view(), spec)?.view())?)
}

/// Decoding of the posterior mean under an all-zero label.
pub fn null_sample_cvae(cvae: &CvaeModel, x: ArrayView2<f64>) -> Result<Array2<f64>> {
    let (mu, _) = cvae.encode(x)?;
    let zeros = Array2::zeros((x.nrows(), cvae.config().s_classes));
    Ok(cvae.decode(mu.view(), zeros.view())?)
}

/// Decoding of a zero code under each label: what the label alone contributes.
pub fn null_sample_cvae_b(cvae: &CvaeModel, s: &[usize]) -> Result<Array2<f64>> {
    let z = Array2::zeros((s.len(), cvae.latent_dim()));
    let labels = one_hot(s, cvae.config().s_classes);
    Ok(cvae.decode(z.view(), labels.view())?)
}

/// A trained encoder producing invariant representations.
#[derive(Debug, Clone, Copy)]
pub enum Encoder<'a> {
    Flow { model: &'a FlowModel, partition: PartitionSpec },
    Cvae(&'a CvaeModel),
}

impl Encoder<'_> {
    /// Invariant code and null-sample of each row.
    pub fn encode(&self, x: ArrayView2<f64>) -> Result<(Array2<f64>, Array2<f64>)> {
        match *self {
            Encoder::Flow { model, partition } => {
                let (z, _) = model.forward(x)?;
                let zu = partition_owned(&z, &partition)?;
                let xu = model.inverse(mask_sensitive(z.view(), &partition)?.view())?;
                Ok((zu, xu))
            }
            Encoder::Cvae(model) => {
                let (mu, _) = model.encode(x)?;
                let zeros = Array2::zeros((x.nrows(), model.config().s_classes));
                let xu = model.decode(mu.view(), zeros.view())?;
                Ok((mu, xu))
            }
        }
    }
}

fn partition_owned(z: &Array2<f64>, spec: &PartitionSpec) -> Result<Array2<f64>> {
    Ok(partition(z.view(), spec)?.0.to_owned())
}

/// Invariant codes and null-samples of a dataset, with its labels.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedDataset {
    pub codes: Array2<f64>,
    pub null_samples: Array2<f64>,
    /// `[C, H, W]` of one null-sample.
    pub sample_shape: [usize; 3],
    pub s: Vec<usize>,
    pub y: Option<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub file: String,
    pub shape: Vec<usize>,
    pub dtype: String,
}

/// `manifest.json` of an encoded-dataset directory. All tensors are
/// little-endian `f32`, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncodingManifest {
    pub codes: TensorEntry,
    pub null_samples: TensorEntry,
    pub sample_shape: [usize; 3],
    pub s: TensorEntry,
    pub y: Option<TensorEntry>,
}

fn write_f32(dir: &Path, file: &str, shape: Vec<usize>, values: impl Iterator<Item = f64>) -> Result<TensorEntry> {
    let bytes: Vec<u8> = values.flat_map(|v| (v as f32).to_le_bytes()).collect();
    let path = dir.join(file);
    std::fs::write(&path, bytes).map_err(io_err(&path))?;
    Ok(TensorEntry { file: file.into(), shape, dtype: "f32".into() })
}

fn read_f32(dir: &Path, entry: &TensorEntry) -> Result<Vec<f32>> {
    if entry.dtype != "f32" {
        return Err(InvarianceError::Manifest(format!("unsupported dtype {}", entry.dtype)));
    }
    let path = dir.join(&entry.file);
    let bytes = std::fs::read(&path).map_err(io_err(&path))?;
    let expected: usize = entry.shape.iter().product();
    if bytes.len() != 4 * expected {
        return Err(InvarianceError::Manifest(format!(
            "{} holds {} bytes, shape {:?} needs {}",
            entry.file,
            bytes.len(),
            entry.shape,
            4 * expected
        )));
    }
    Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect())
}

fn read_matrix(dir: &Path, entry: &TensorEntry) -> Result<Array2<f64>> {
    let [rows, cols] = entry.shape[..] else {
        return Err(InvarianceError::Manifest(format!("{} is not a matrix", entry.file)));
    };
    let values = read_f32(dir, entry)?.into_iter().map(f64::from).collect();
    Ok(Array2::from_shape_vec((rows, cols), values).expect("size checked"))
}

fn read_labels(dir: &Path, entry: &TensorEntry) -> Result<Vec<usize>> {
    Ok(read_f32(dir, entry)?.into_iter().map(|v| v as usize).collect())
}

impl EncodedDataset {
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
        let matrix = |m: &Array2<f64>| vec![m.nrows(), m.ncols()];
        let manifest = EncodingManifest {
            codes: write_f32(dir, "codes.f32", matrix(&self.codes), self.codes.iter().copied())?,
            null_samples: write_f32(dir, "null_samples.f32", matrix(&self.null_samples), self.null_samples.iter().copied())?,
            sample_shape: self.sample_shape,
            s: write_f32(dir, "s.f32", vec![self.s.len()], self.s.iter().map(|&v| v as f64))?,
            y: match &self.y {
                Some(y) => Some(write_f32(dir, "y.f32", vec![y.len()], y.iter().map(|&v| v as f64))?),
                None => None,
            },
        };
        let path = dir.join("manifest.json");
        let text = serde_json::to_string_pretty(&manifest).expect("manifest serialises");
        std::fs::write(&path, text).map_err(io_err(&path))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("manifest.json");
        let text = std::fs::read_to_string(&path).map_err(io_err(&path))?;
        let manifest: EncodingManifest =
            serde_json::from_str(&text).map_err(|e| InvarianceError::Manifest(e.to_string()))?;
        Ok(Self {
            codes: read_matrix(dir, &manifest.codes)?,
            null_samples: read_matrix(dir, &manifest.null_samples)?,
            sample_shape: manifest.sample_shape,
            s: read_labels(dir, &manifest.s)?,
            y: manifest.y.as_ref().map(|e| read_labels(dir, e)).transpose()?,
        })
    }
}

/// Encodes `x` in batches and, when `out_dir` is given, persists the result
/// there.
pub fn encode_dataset(
    encoder: Encoder<'_>,
    x: ArrayView2<f64>,
    sample_shape: [usize; 3],
    s: &[usize],
    y: Option<&[usize]>,
    out_dir: Option<&Path>,
) -> Result<EncodedDataset> {
    const BATCH: usize = 256;
    let mut codes = Vec::new();
    let mut nulls = Vec::new();
    for start in (0..x.nrows()).step_by(BATCH) {
        let end = (start + BATCH).min(x.nrows());
        let (zu, xu) = encoder.encode(x.slice(s![start..end, ..]))?;
        codes.push(zu);
        nulls.push(xu);
    }
    let join = |parts: Vec<Array2<f64>>, width: usize| {
        if parts.is_empty() {
            Array2::zeros((0, width))
        } else {
            let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
            concatenate(Axis(0), &views).expect("equal widths")
        }
    };
    let encoded = EncodedDataset {
        codes: join(codes, 0),
        null_samples: join(nulls, x.ncols()),
        sample_shape,
        s: s.to_vec(),
        y: y.map(<[usize]>::to_vec),
    };
    if let Some(dir) = out_dir {
        encoded.save(dir)?;
    }
    Ok(encoded)
}

/// Stops training once the loss has changed by less than `tolerance`
/// (relative) across the last `window` epochs.
#[derive(Debug, Clone)]
pub struct Plateau {
    pub window: usize,
    pub tolerance: f64,
    history: Vec<f64>,
}

impl Default for Plateau {
    fn default() -> Self {
        Self { window: 5, tolerance: 0.01, history: Vec::new() }
    }
}

impl Plateau {
    /// Records an epoch loss and reports whether training has plateaued.
    pub fn observe(&mut self, loss: f64) -> bool {
        self.history.push(loss);
        let n = self.history.len();
        if n <= self.window {
            return false;
        }
        let before = self.history[n - 1 - self.window];
        (loss - before).abs() <= self.tolerance * before.abs().max(1e-12)
    }
}

/// Multinomial logistic regression on standardised features.
#[derive(Debug, Clone)]
pub struct LogisticProbe {
    layer: Dense,
    mean: Array1<f64>,
    std: Array1<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeOptions {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for ProbeOptions {
    fn default() -> Self {
        Self { epochs: 20, batch_size: 128, lr: 1e-2, seed: 0 }
    }
}

impl LogisticProbe {
    pub fn fit(x: ArrayView2<f64>, labels: &[usize], classes: usize, options: &ProbeOptions) -> Result<Self> {
        if x.nrows() == 0 {
            return Err(NnError::EmptyBatch.into());
        }
        let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
        let mean = x.mean_axis(Axis(0)).expect("non-empty");
        let std = x.std_axis(Axis(0), 0.0).mapv(|v| if v > 1e-12 { v } else { 1.0 });
        let xs = (&x - &mean) / &std;
        let mut layer = Dense::new(x.ncols(), classes.max(2), Init::Zeros, &mut rng);
        let mut opt = RAdam::new(options.lr);
        let mut order: Vec<usize> = (0..x.nrows()).collect();
        for _ in 0..options.epochs {
            order.shuffle(&mut rng);
            for chunk in order.chunks(options.batch_size.max(1)) {
                let xb = xs.select(Axis(0), chunk);
                let yb: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
                let logits = layer.forward(xb.view());
                let (_, grad) = softmax_cross_entropy(logits.view(), &yb)?;
                layer.backward(xb.view(), grad.view());
                opt.step(&mut layer);
                nullsample_nn::zero_grad(&mut layer);
            }
        }
        Ok(Self { layer, mean, std })
    }

    pub fn predict(&self, x: ArrayView2<f64>) -> Vec<usize> {
        let xs = (&x - &self.mean) / &self.std;
        argmax_rows(self.layer.forward(xs.view()).view())
    }

    pub fn accuracy(&self, x: ArrayView2<f64>, labels: &[usize]) -> f64 {
        let preds = self.predict(x);
        let hits = preds.iter().zip(labels).filter(|(p, l)| p == l).count();
        hits as f64 / labels.len().max(1) as f64
    }

    pub fn param_count(&self) -> usize {
        nullsample_nn::param_count(&self.layer)
    }
}

/// Largest class frequency: the accuracy of always guessing the majority.
pub fn chance_level(labels: &[usize]) -> f64 {
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    let mut counts = vec![0usize; classes];
    for &l in labels {
        counts[l] += 1;
    }
    counts.into_iter().max().unwrap_or(0) as f64 / labels.len().max(1) as f64
}

/// Invariant codes produced by an encoder trained with a given partition,
/// split for fitting and scoring a probe.
#[derive(Debug, Clone)]
pub struct ProbeData {
    pub train: Array2<f64>,
    pub train_s: Vec<usize>,
    pub held_out: Array2<f64>,
    pub held_out_s: Vec<usize>,
}

/// Trains an encoder for a candidate sensitive-part size.
pub trait PartitionTrainer {
    /// Width of the full code.
    fn code_dim(&self) -> usize;
    fn train(&mut self, zb: usize) -> Result<ProbeData>;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TuningOptions {
    pub initial: usize,
    /// Allowed probe accuracy above chance.
    pub margin: f64,
    pub probe: ProbeOptions,
}

impl Default for TuningOptions {
    fn default() -> Self {
        Self { initial: 1, margin: 0.03, probe: ProbeOptions::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuningStep {
    pub zb: usize,
    pub probe_accuracy: f64,
    pub chance: f64,
    pub invariant: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuningOutcome {
    pub zb: usize,
    pub probe_accuracy: f64,
    pub chance: f64,
    pub trace: Vec<TuningStep>,
}

fn evaluate_size(trainer: &mut dyn PartitionTrainer, zb: usize, options: &TuningOptions) -> Result<TuningStep> {
    let data = trainer.train(zb)?;
    let classes = data.train_s.iter().chain(&data.held_out_s).max().map_or(2, |m| m + 1);
    let probe = LogisticProbe::fit(data.train.view(), &data.train_s, classes, &options.probe)?;
    let probe_accuracy = probe.accuracy(data.held_out.view(), &data.held_out_s);
    let chance = chance_level(&data.held_out_s);
    let invariant = probe_accuracy <= chance + options.margin;
    log::info!("zb {zb}: probe {probe_accuracy:.4} vs chance {chance:.4}");
    Ok(TuningStep { zb, probe_accuracy, chance, invariant })
}

/// Smallest sensitive-part size for which a linear probe cannot predict `s`
/// from the invariant part better than chance plus a margin.
///
/// Sizes grow geometrically from `initial` until one passes, then the gap to
/// the last failing size is bisected.
pub fn tune_partition_size(trainer: &mut dyn PartitionTrainer, options: &TuningOptions) -> Result<TuningOutcome> {
    let max = trainer.code_dim().saturating_sub(1);
    let mut trace = Vec::new();
    if max == 0 {
        return Err(InvarianceError::SearchExhausted { max, trace });
    }
    let mut lo = 0;
    let mut zb = options.initial.clamp(1, max);
    let mut best = loop {
        let step = evaluate_size(trainer, zb, options)?;
        trace.push(step.clone());
        if step.invariant {
            break step;
        }
        if zb == max {
            return Err(InvarianceError::SearchExhausted { max, trace });
        }
        lo = zb;
        zb = (zb * 2).min(max);
    };
    while best.zb - lo > 1 {
        let mid = lo + (best.zb - lo) / 2;
        let step = evaluate_size(trainer, mid, options)?;
        trace.push(step.clone());
        if step.invariant {
            best = step;
        } else {
            lo = mid;
        }
    }
    Ok(TuningOutcome { zb: best.zb, probe_accuracy: best.probe_accuracy, chance: best.chance, trace })
}

/// Synthetic data whose sensitive attribute is carried by `planted`
/// coordinates, with a trainer that learns to move the most informative
/// coordinates into the sensitive part.
#[derive(Debug, Clone)]
pub struct PlantedTrainer {
    pub x: Array2<f64>,
    pub s: Vec<usize>,
    /// Fraction of rows used to learn the ordering and fit the probe.
    pub train_fraction: f64,
}

impl PlantedTrainer {
    /// `n` rows of `dim` unit-variance Gaussian features; the first `planted`
    /// are shifted by `+-signal` according to a balanced binary `s`, then
    /// all columns are shuffled.
    pub fn generate(n: usize, dim: usize, planted: usize, signal: f64, seed: u64) -> Self {
        use rand_distr::{Distribution, StandardNormal};
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s: Vec<usize> = (0..n).map(|i| i % 2).collect();
        let mut columns: Vec<usize> = (0..dim).collect();
        columns.shuffle(&mut rng);
        let mut x = Array2::zeros((n, dim));
        for i in 0..n {
            for (j, &col) in columns.iter().enumerate() {
                let noise: f64 = StandardNormal.sample(&mut rng);
                let shift = if j < planted { signal * (2.0 * s[i] as f64 - 1.0) } else { 0.0 };
                x[[i, col]] = noise + shift;
            }
        }
        Self { x, s, train_fraction: 0.5 }
    }

    fn cut(&self) -> usize {
        (self.x.nrows() as f64 * self.train_fraction) as usize
    }
}

impl PartitionTrainer for PlantedTrainer {
    fn code_dim(&self) -> usize {
        self.x.ncols()
    }

    fn train(&mut self, zb: usize) -> Result<ProbeData> {
        let cut = self.cut();
        let (train, held_out) = self.x.view().split_at(Axis(0), cut);
        let (train_s, held_out_s) = self.s.split_at(cut);
        // Score each coordinate by the gap between its class means.
        let score = |j: usize| {
            let (mut sum, mut count) = ([0.0; 2], [0usize; 2]);
            for (v, &g) in train.column(j).iter().zip(train_s) {
                sum[g.min(1)] += v;
                count[g.min(1)] += 1;
            }
            (sum[1] / count[1].max(1) as f64 - sum[0] / count[0].max(1) as f64).abs()
        };
        let mut order: Vec<usize> = (0..self.x.ncols()).collect();
        order.sort_by(|&a, &b| score(a).total_cmp(&score(b)));
        let keep = &order[..self.x.ncols() - zb];
        Ok(ProbeData {
            train: train.select(Axis(1), keep),
            train_s: train_s.to_vec(),
            held_out: held_out.select(Axis(1), keep),
            held_out_s: held_out_s.to_vec(),
        })
    }
}
