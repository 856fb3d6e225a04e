//! Conditional VAE whose decoder sees the invariant code and a one-hot
//! sensitive label; feeding an all-zero label yields null-samples.

use std::collections::BTreeMap;

use ndarray::{concatenate, s, Array1, Array2, ArrayD, ArrayView2, Axis, Ix2, Zip};
use nullsample_nn::init::Init;
use nullsample_nn::layers::{Activation, Conv2d, Dense, Layer, Sequential};
use nullsample_nn::loss::{absolute_error, log_softmax, squared_error};
use nullsample_nn::{join, Param, Parameters, RAdam};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adversary::{AdversaryEnsemble, AdversaryError, GradientReversal};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CvaeError {
    #[error("KL weight must be non-negative, got {0}")]
    NegativeBeta(f64),
    #[error("row {row} of the label matrix is neither one-hot nor all zeros")]
    InvalidLabelVector { row: usize },
    #[error("expected width {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("invalid cVAE configuration: {0}")]
    InvalidConfig(String),
    #[error("non-finite loss")]
    NumericalInstability,
    #[error("checkpoint tensor `{0}` missing or malformed")]
    BadTensor(String),
    #[error(transparent)]
    Adversary(#[from] AdversaryError),
}

pub type Result<T> = std::result::Result<T, CvaeError>;

/// Reconstruction term of the objective.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReconLoss {
    SquaredError,
    AbsoluteError,
    /// Cross-entropy over each one-hot feature group `(start, len)`, squared
    /// error on the remaining columns.
    Mixed { categorical: Vec<(usize, usize)> },
}

impl ReconLoss {
    /// Per-example summed loss averaged over the batch, and its gradient.
    pub fn evaluate(&self, pred: ArrayView2<f64>, target: ArrayView2<f64>) -> (f64, Array2<f64>) {
        match self {
            ReconLoss::SquaredError => squared_error(pred, target),
            ReconLoss::AbsoluteError => absolute_error(pred, target),
            ReconLoss::Mixed { categorical } => {
                let n = pred.nrows().max(1) as f64;
                let mut continuous = vec![true; pred.ncols()];
                let mut loss = 0.0;
                let mut grad = Array2::zeros(pred.raw_dim());
                for &(start, len) in categorical {
                    continuous[start..start + len].iter_mut().for_each(|c| *c = false);
                    let logits = pred.slice(s![.., start..start + len]);
                    let logp = log_softmax(logits);
                    let t = target.slice(s![.., start..start + len]);
                    loss -= (&logp * &t).sum() / n;
                    let g = (logp.mapv(f64::exp) * t.sum_axis(Axis(1)).insert_axis(Axis(1)) - t) / n;
                    grad.slice_mut(s![.., start..start + len]).assign(&g);
                }
                for (j, _) in continuous.iter().enumerate().filter(|(_, c)| **c) {
                    for i in 0..pred.nrows() {
                        let d = pred[[i, j]] - target[[i, j]];
                        loss += d * d / n;
                        grad[[i, j]] = 2.0 * d / n;
                    }
                }
                (loss, grad)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CvaeArch {
    /// Strided convolutions down, upsample + convolution back up.
    Conv { base_channels: usize, levels: usize },
    /// One hidden layer each way.
    Dense { hidden: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CvaeConfig {
    /// `[C, H, W]`; tabular data uses `[D, 1, 1]`.
    pub input_shape: [usize; 3],
    pub latent: usize,
    pub s_classes: usize,
    pub beta: f64,
    pub recon: ReconLoss,
    pub arch: CvaeArch,
}

impl CvaeConfig {
    pub fn adult(input_dim: usize, categorical: Vec<(usize, usize)>) -> Self {
        Self {
            input_shape: [input_dim, 1, 1],
            latent: 35,
            s_classes: 2,
            beta: 0.0,
            recon: ReconLoss::Mixed { categorical },
            arch: CvaeArch::Dense { hidden: 35 },
        }
    }

    pub fn cmnist() -> Self {
        Self {
            input_shape: [3, 32, 32],
            latent: 256,
            s_classes: 10,
            beta: 0.01,
            recon: ReconLoss::SquaredError,
            arch: CvaeArch::Conv { base_channels: 32, levels: 4 },
        }
    }

    pub fn celeba() -> Self {
        Self {
            input_shape: [3, 64, 64],
            s_classes: 2,
            beta: 1.0,
            recon: ReconLoss::AbsoluteError,
            arch: CvaeArch::Conv { base_channels: 32, levels: 5 },
            ..Self::cmnist()
        }
    }

    pub fn input_dim(&self) -> usize {
        self.input_shape.iter().product()
    }

    pub fn validate(&self) -> Result<()> {
        if self.beta < 0.0 {
            return Err(CvaeError::NegativeBeta(self.beta));
        }
        if self.latent == 0 || self.s_classes == 0 {
            return Err(CvaeError::InvalidConfig("latent width and class count must be positive".into()));
        }
        if let CvaeArch::Conv { levels, base_channels } = self.arch {
            let [_, h, w] = self.input_shape;
            let f = 1usize << levels;
            if base_channels == 0 || h % f != 0 || w % f != 0 {
                return Err(CvaeError::InvalidConfig(format!("{h}x{w} input cannot be halved {levels} times")));
            }
        }
        Ok(())
    }
}

/// Loss components of one batch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CvaeLoss {
    pub total: f64,
    pub recon: f64,
    pub kl: f64,
    pub adv: f64,
}

#[derive(Debug, Clone)]
pub struct CvaeModel {
    config: CvaeConfig,
    seed: u64,
    encoder: Sequential,
    decoder: Sequential,
}

impl CvaeModel {
    pub fn new(config: CvaeConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let [c, h, w] = config.input_shape;
        let (encoder, decoder) = match config.arch {
            CvaeArch::Dense { hidden } => {
                let d = config.input_dim();
                (
                    Sequential::new(vec![
                        Layer::Dense(Dense::new(d, hidden, Init::LecunNormal, &mut rng)),
                        Layer::Act(Activation::Selu),
                        Layer::Dense(Dense::new(hidden, 2 * config.latent, Init::LecunNormal, &mut rng)),
                    ]),
                    Sequential::new(vec![
                        Layer::Dense(Dense::new(config.latent + config.s_classes, hidden, Init::LecunNormal, &mut rng)),
                        Layer::Act(Activation::Selu),
                        Layer::Dense(Dense::new(hidden, d, Init::LecunNormal, &mut rng)),
                    ]),
                )
            }
            CvaeArch::Conv { base_channels, levels } => {
                let mut enc = vec![Layer::Unflatten([c, h, w])];
                let mut channels = c;
                let mut f = base_channels;
                for _ in 0..levels {
                    enc.push(Layer::Conv2d(Conv2d::same(channels, f, 3, Init::Xavier, &mut rng)));
                    enc.push(Layer::Act(Activation::Relu));
                    enc.push(Layer::Conv2d(Conv2d::new(f, f, 3, 2, 1, Init::Xavier, &mut rng)));
                    enc.push(Layer::Act(Activation::Relu));
                    channels = f;
                    f *= 2;
                }
                let (hb, wb) = (h >> levels, w >> levels);
                let flat = channels * hb * wb;
                enc.push(Layer::Flatten);
                enc.push(Layer::Dense(Dense::new(flat, 2 * config.latent, Init::Xavier, &mut rng)));

                let mut dec = vec![
                    Layer::Dense(Dense::new(config.latent + config.s_classes, flat, Init::Xavier, &mut rng)),
                    Layer::Unflatten([channels, hb, wb]),
                    Layer::Act(Activation::Relu),
                ];
                for level in 0..levels {
                    let out = if level + 1 == levels { base_channels } else { channels / 2 };
                    dec.push(Layer::Upsample2);
                    dec.push(Layer::Conv2d(Conv2d::same(channels, out, 3, Init::Xavier, &mut rng)));
                    dec.push(Layer::Act(Activation::Relu));
                    channels = out;
                }
                dec.push(Layer::Conv2d(Conv2d::same(channels, c, 3, Init::Xavier, &mut rng)));
                dec.push(Layer::Flatten);
                (Sequential::new(enc), Sequential::new(dec))
            }
        };
        Ok(Self { config, seed, encoder, decoder })
    }

    pub fn config(&self) -> &CvaeConfig {
        &self.config
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn latent_dim(&self) -> usize {
        self.config.latent
    }

    fn check(&self, x: ArrayView2<f64>) -> Result<()> {
        if x.ncols() != self.config.input_dim() {
            return Err(CvaeError::DimensionMismatch { expected: self.config.input_dim(), got: x.ncols() });
        }
        Ok(())
    }

    /// Posterior mean and log-variance.
    pub fn encode(&self, x: ArrayView2<f64>) -> Result<(Array2<f64>, Array2<f64>)> {
        self.check(x)?;
        let h = as2(self.encoder.forward(&x.to_owned().into_dyn()));
        Ok(split_stats(&h, self.config.latent))
    }

    /// Decodes codes under the given label vectors (one-hot rows, or all
    /// zeros for null-sampling).
    pub fn decode(&self, z: ArrayView2<f64>, s_onehot: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_decoder_input(z, s_onehot)?;
        let input = concatenate(Axis(1), &[z, s_onehot]).expect("same batch");
        Ok(as2(self.decoder.forward(&input.into_dyn())))
    }

    fn check_decoder_input(&self, z: ArrayView2<f64>, s_onehot: ArrayView2<f64>) -> Result<()> {
        if z.ncols() != self.config.latent {
            return Err(CvaeError::DimensionMismatch { expected: self.config.latent, got: z.ncols() });
        }
        if s_onehot.ncols() != self.config.s_classes {
            return Err(CvaeError::DimensionMismatch { expected: self.config.s_classes, got: s_onehot.ncols() });
        }
        validate_label_rows(s_onehot)
    }

    /// One optimisation step on a batch: reconstruction + beta * KL, with the
    /// adversary reading the sampled code through gradient reversal. The
    /// adversary is updated as well.
    pub fn train_step<R: Rng + ?Sized>(
        &mut self,
        x: ArrayView2<f64>,
        s: &[usize],
        adversary: Option<(&mut AdversaryEnsemble, GradientReversal)>,
        optimiser: &mut RAdam,
        rng: &mut R,
    ) -> Result<CvaeLoss> {
        let (loss, _) = self.loss_and_grad(x, s, adversary, rng)?;
        optimiser.step(self);
        nullsample_nn::zero_grad(self);
        Ok(loss)
    }

    /// Forward and backward pass; gradients are accumulated, not applied.
    /// Also returns the sampled code.
    pub fn loss_and_grad<R: Rng + ?Sized>(
        &mut self,
        x: ArrayView2<f64>,
        s: &[usize],
        adversary: Option<(&mut AdversaryEnsemble, GradientReversal)>,
        rng: &mut R,
    ) -> Result<(CvaeLoss, Array2<f64>)> {
        self.check(x)?;
        let n = x.nrows() as f64;
        let latent = self.config.latent;
        let (h, enc_caches) = self.encoder.forward_train(x.to_owned().into_dyn());
        let (mu, logvar) = split_stats(&as2(h), latent);
        let eps = standard_normal(mu.raw_dim(), rng);
        let std = logvar.mapv(|v| (0.5 * v).exp());
        let z = &mu + &(&std * &eps);

        let onehot = one_hot(s, self.config.s_classes);
        let dec_in = concatenate(Axis(1), &[z.view(), onehot.view()]).unwrap();
        let (xhat, dec_caches) = self.decoder.forward_train(dec_in.into_dyn());
        let (recon, dxhat) = self.config.recon.evaluate(as2(xhat).view(), x);
        let dz_dec = as2(self.decoder.backward(dec_caches, dxhat.into_dyn()));
        let mut dz = dz_dec.slice(s![.., ..latent]).to_owned();

        let kl = kl_divergence(mu.view(), logvar.view()).mean().unwrap_or(0.0);
        let beta = self.config.beta;

        let adv = match adversary {
            Some((ens, grl)) => {
                let (adv, reversed) = ens.adversarial_step(z.view(), s, grl)?;
                dz += &reversed;
                grl.lambda * adv
            }
            None => 0.0,
        };

        let mut dmu = dz.clone();
        let mut dlogvar = &dz * &eps * &std * 0.5;
        Zip::from(&mut dmu).and(&mu).for_each(|d, &m| *d += beta * m / n);
        Zip::from(&mut dlogvar).and(&logvar).for_each(|d, &lv| *d += beta * 0.5 * (lv.exp() - 1.0) / n);
        let dh = concatenate(Axis(1), &[dmu.view(), dlogvar.view()]).unwrap();
        self.encoder.backward(enc_caches, dh.into_dyn());

        let total = recon + beta * kl + adv;
        if !total.is_finite() {
            return Err(CvaeError::NumericalInstability);
        }
        Ok((CvaeLoss { total, recon, kl, adv }, z))
    }

    pub fn tensors(&self) -> BTreeMap<String, ArrayD<f64>> {
        let mut out = BTreeMap::new();
        self.visit("", &mut |name, p| {
            out.insert(name.to_string(), p.value.clone());
        });
        out
    }

    pub fn from_tensors(config: CvaeConfig, seed: u64, tensors: &BTreeMap<String, ArrayD<f64>>) -> Result<Self> {
        let mut model = Self::new(config, seed)?;
        let mut missing = None;
        model.visit_mut("", &mut |name, p| match tensors.get(name) {
            Some(v) if v.shape() == p.value.shape() => p.value.assign(v),
            _ => missing = missing.take().or(Some(name.to_string())),
        });
        match missing {
            Some(name) => Err(CvaeError::BadTensor(name)),
            None => Ok(model),
        }
    }
}

impl Parameters for CvaeModel {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        self.encoder.visit(&join(prefix, "encoder"), f);
        self.decoder.visit(&join(prefix, "decoder"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.encoder.visit_mut(&join(prefix, "encoder"), f);
        self.decoder.visit_mut(&join(prefix, "decoder"), f);
    }
}

/// `z = mu + exp(logvar / 2) * eps` with `eps ~ N(0, I)`.
pub fn reparameterize<R: Rng + ?Sized>(mu: ArrayView2<f64>, logvar: ArrayView2<f64>, rng: &mut R) -> Array2<f64> {
    let eps = standard_normal(mu.raw_dim(), rng);
    &mu + &(logvar.mapv(|v| (0.5 * v).exp()) * eps)
}

/// Closed-form `KL(N(mu, exp(logvar)) || N(0, I))` per row.
pub fn kl_divergence(mu: ArrayView2<f64>, logvar: ArrayView2<f64>) -> Array1<f64> {
    let mut out = Array1::zeros(mu.nrows());
    Zip::from(&mut out).and(mu.rows()).and(logvar.rows()).for_each(|o, m, lv| {
        *o = 0.5 * m.iter().zip(lv.iter()).map(|(m, lv)| m * m + lv.exp() - lv - 1.0).sum::<f64>();
    });
    out
}

pub fn one_hot(labels: &[usize], classes: usize) -> Array2<f64> {
    let mut out = Array2::zeros((labels.len(), classes));
    for (i, &l) in labels.iter().enumerate() {
        out[[i, l]] = 1.0;
    }
    out
}

fn validate_label_rows(s: ArrayView2<f64>) -> Result<()> {
    for (row, r) in s.rows().into_iter().enumerate() {
        let ones = r.iter().filter(|v| **v == 1.0).count();
        let zeros = r.iter().filter(|v| **v == 0.0).count();
        if zeros != r.len() && !(ones == 1 && zeros == r.len() - 1) {
            return Err(CvaeError::InvalidLabelVector { row });
        }
    }
    Ok(())
}

fn standard_normal<R: Rng + ?Sized>(dim: ndarray::Ix2, rng: &mut R) -> Array2<f64> {
    Array2::from_shape_simple_fn(dim, || -> f64 { StandardNormal.sample(rng) })
}

fn split_stats(h: &Array2<f64>, latent: usize) -> (Array2<f64>, Array2<f64>) {
    (h.slice(s![.., ..latent]).to_owned(), h.slice(s![.., latent..]).to_owned())
}

fn as2(x: ArrayD<f64>) -> Array2<f64> {
    x.into_dimensionality::<Ix2>().expect("rank-2 activations")
}
