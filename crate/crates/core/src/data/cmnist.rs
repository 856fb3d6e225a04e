use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{colorize, DataError, LabelledDataset, MnistRaw, Result, Split};

/// Size and colouring of a coloured-MNIST build.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CmnistSpec {
    pub train_size: usize,
    pub test_size: usize,
    /// Drawn from the training digits, disjoint from the training set.
    pub representative_size: usize,
    /// Standard deviation of the per-image colour around its class mean.
    pub sigma: f64,
    /// Output side length: 32 (padded), or 16 / 8 after average pooling.
    pub side: usize,
}

impl Default for CmnistSpec {
    fn default() -> Self {
        Self { train_size: 10_000, test_size: 2_000, representative_size: 10_000, sigma: 0.0, side: 32 }
    }
}

/// Representative (unbiased colours, no targets), biased training and
/// unbiased test sets. `y` is the digit and `s` the colour class.
#[derive(Debug, Clone)]
pub struct CmnistSplits {
    pub representative: LabelledDataset,
    pub train: LabelledDataset,
    pub test: LabelledDataset,
}

/// Zero-pads square single-channel images of side `side` by `pad` pixels on
/// every edge.
pub fn pad_images(images: ArrayView2<f64>, side: usize, pad: usize) -> Array2<f64> {
    let out_side = side + 2 * pad;
    let mut out = Array2::zeros((images.nrows(), out_side * out_side));
    for (src, mut dst) in images.rows().into_iter().zip(out.rows_mut()) {
        for r in 0..side {
            for c in 0..side {
                dst[(r + pad) * out_side + c + pad] = src[r * side + c];
            }
        }
    }
    out
}

/// Average-pools `[N, C*side*side]` images by `factor` in each direction.
pub fn downsample(images: ArrayView2<f64>, channels: usize, side: usize, factor: usize) -> Array2<f64> {
    let out_side = side / factor;
    let norm = (factor * factor) as f64;
    let mut out = Array2::zeros((images.nrows(), channels * out_side * out_side));
    for (src, mut dst) in images.rows().into_iter().zip(out.rows_mut()) {
        for ch in 0..channels {
            for r in 0..out_side {
                for c in 0..out_side {
                    let mut acc = 0.0;
                    for dr in 0..factor {
                        for dc in 0..factor {
                            acc += src[ch * side * side + (r * factor + dr) * side + c * factor + dc];
                        }
                    }
                    dst[ch * out_side * out_side + r * out_side + c] = acc / norm;
                }
            }
        }
    }
    out
}

fn prepare(images: ArrayView2<f64>, side: usize, out_side: usize) -> Array2<f64> {
    let padded = pad_images(images, side, 2);
    let full = side + 4;
    if out_side == full {
        padded
    } else {
        downsample(padded.view(), 1, full, full / out_side)
    }
}

pub fn build_cmnist<R: Rng + ?Sized>(raw: &MnistRaw, spec: &CmnistSpec, rng: &mut R) -> Result<CmnistSplits> {
    let full = raw.side + 4;
    if spec.side == 0 || !full.is_multiple_of(spec.side) {
        return Err(DataError::Malformed {
            what: "cmnist spec".into(),
            detail: format!("side {} does not divide {full}", spec.side),
        });
    }
    if spec.sigma.is_nan() || spec.sigma < 0.0 {
        return Err(DataError::NegativeSigma(spec.sigma));
    }
    let needed = spec.train_size + spec.representative_size;
    if needed > raw.train_images.nrows() {
        return Err(DataError::NotEnoughRecords { needed, available: raw.train_images.nrows() });
    }
    if spec.test_size > raw.test_images.nrows() {
        return Err(DataError::NotEnoughRecords { needed: spec.test_size, available: raw.test_images.nrows() });
    }
    let mut train_order: Vec<usize> = (0..raw.train_images.nrows()).collect();
    train_order.shuffle(rng);
    let (rep_idx, rest) = train_order.split_at(spec.representative_size);
    let train_idx = &rest[..spec.train_size];
    let mut test_order: Vec<usize> = (0..raw.test_images.nrows()).collect();
    test_order.shuffle(rng);
    let test_idx = &test_order[..spec.test_size];

    let shape = [3, spec.side, spec.side];
    let mut make = |images: &Array2<u8>, labels: &[usize], idx: &[usize], biased: bool, split| -> Result<_> {
        let gray = prepare(images.select(Axis(0), idx).mapv(|b| b as f64 / 255.0).view(), raw.side, spec.side);
        let y: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
        let (x, s) = colorize(gray.view(), &y, spec.sigma, biased, rng)?;
        let mut d = LabelledDataset::new(x, shape, s, Some(y), split);
        d.ids = idx.to_vec();
        Ok(d)
    };
    let train = make(&raw.train_images, &raw.train_labels, train_idx, true, Split::Train)?;
    let representative =
        make(&raw.train_images, &raw.train_labels, rep_idx, false, Split::Representative)?.without_targets();
    let test = make(&raw.test_images, &raw.test_labels, test_idx, false, Split::Test)?;
    Ok(CmnistSplits { representative, train, test })
}
