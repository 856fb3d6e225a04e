//! Invertible encoder: a multi-scale stack of squeezes, learned channel
//! mixings and affine couplings.
//!
//! Inputs and codes are flat rows (`[N, D]`); the flow reshapes to
//! `[N, C, H, W]` internally. Factored-out parts come first in the code, so
//! the trailing elements belong to the deepest level.

mod coupling;
mod mixing;
mod squeeze;

pub use coupling::{coupling_scale, AffineCoupling, CouplingCache, CouplingMask};
pub use mixing::{Invertible1x1Conv, MixingCache};
pub use squeeze::{squeeze, unsqueeze};

use std::collections::BTreeMap;
use std::f64::consts::PI;

use ndarray::{concatenate, s, Array1, Array2, Array4, ArrayD, ArrayView2, Axis};
use nullsample_nn::{join, Param, Parameters};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FlowError {
    #[error("invalid flow configuration: {0}")]
    InvalidConfig(String),
    #[error("input has {got} features, flow expects {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("non-finite values produced by block {block}")]
    NumericalInstability { block: usize },
    #[error("empty batch")]
    EmptyBatch,
    #[error("checkpoint tensor `{0}` missing or malformed")]
    BadTensor(String),
}

pub type Result<T> = std::result::Result<T, FlowError>;

/// Architecture of a [`FlowModel`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlowConfig {
    /// `[C, H, W]`; tabular data uses `[D, 1, 1]`.
    pub input_shape: [usize; 3],
    pub levels: usize,
    /// Flow steps per level.
    pub depth: usize,
    /// Width of the coupling subnets.
    pub hidden_channels: usize,
    /// Spatial kernel of the coupling subnets; 1 makes them fully connected.
    pub kernel: usize,
    /// Whether each level starts with a 2x2 squeeze.
    pub squeeze: bool,
    /// Whether half the channels are set aside after every level but the last.
    pub factor_out: bool,
    pub mask: CouplingMask,
}

impl FlowConfig {
    /// Tabular flow over 35-dimensional pre-embedded records.
    pub fn adult() -> Self {
        Self {
            input_shape: [35, 1, 1],
            levels: 1,
            depth: 1,
            hidden_channels: 35,
            kernel: 1,
            squeeze: false,
            factor_out: false,
            mask: CouplingMask::ChannelHalves,
        }
    }

    /// Full-scale coloured-MNIST flow on 32x32 inputs.
    pub fn cmnist() -> Self {
        Self {
            input_shape: [3, 32, 32],
            levels: 3,
            depth: 16,
            hidden_channels: 512,
            kernel: 3,
            squeeze: true,
            factor_out: true,
            mask: CouplingMask::ChannelHalves,
        }
    }

    /// Full-scale CelebA flow on 64x64 inputs.
    pub fn celeba() -> Self {
        Self { input_shape: [3, 64, 64], depth: 32, ..Self::cmnist() }
    }

    /// Small two-level flow for 16x16 coloured MNIST on a CPU.
    pub fn cmnist_desk() -> Self {
        Self { input_shape: [3, 16, 16], levels: 2, depth: 4, hidden_channels: 64, factor_out: false, ..Self::cmnist() }
    }

    pub fn input_dim(&self) -> usize {
        self.input_shape.iter().product()
    }

    pub fn validate(&self) -> Result<()> {
        let [c, h, w] = self.input_shape;
        let bad = |m: String| Err(FlowError::InvalidConfig(m));
        if c == 0 || h == 0 || w == 0 {
            return bad("input shape must be non-empty".into());
        }
        if self.levels == 0 || self.depth == 0 || self.hidden_channels == 0 {
            return bad("levels, depth and hidden_channels must be positive".into());
        }
        if self.kernel.is_multiple_of(2) {
            return bad(format!("kernel {} must be odd", self.kernel));
        }
        if self.squeeze {
            let factor = 1usize << self.levels;
            if h % factor != 0 || w % factor != 0 {
                return bad(format!("{h}x{w} is not divisible by 2^{} for squeezing", self.levels));
            }
        }
        if self.mask == CouplingMask::ChannelHalves && c < 2 && !self.squeeze {
            return bad("channel-halves coupling needs at least two channels".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
enum Block {
    Squeeze,
    Mix(Invertible1x1Conv),
    Couple(AffineCoupling),
    /// Sets aside the first `channels / 2` channels as part of the code.
    FactorOut,
}

#[derive(Debug, Clone)]
enum BlockCache {
    Shape,
    Mix(MixingCache),
    Couple(CouplingCache),
}

/// Intermediate values recorded by a training pass.
#[derive(Debug, Clone)]
pub struct FlowTape {
    caches: Vec<BlockCache>,
}

/// Multi-scale normalising flow with a standard-normal base density.
#[derive(Debug, Clone)]
pub struct FlowModel {
    config: FlowConfig,
    seed: u64,
    blocks: Vec<Block>,
    /// `[C, H, W]` of every factored-out part, in emission order.
    factor_shapes: Vec<[usize; 3]>,
    final_shape: [usize; 3],
}

impl FlowModel {
    pub fn new(config: FlowConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let [mut c, mut h, mut w] = config.input_shape;
        let mut blocks = Vec::new();
        let mut factor_shapes = Vec::new();
        for level in 0..config.levels {
            if config.squeeze {
                blocks.push(Block::Squeeze);
                (c, h, w) = (c * 4, h / 2, w / 2);
            }
            for _ in 0..config.depth {
                blocks.push(Block::Mix(Invertible1x1Conv::new(c, &mut rng)));
                for parity in [false, true] {
                    blocks.push(Block::Couple(AffineCoupling::new(
                        c,
                        config.hidden_channels,
                        config.kernel,
                        config.mask,
                        parity,
                        &mut rng,
                    )));
                }
            }
            if config.factor_out && level + 1 < config.levels {
                blocks.push(Block::FactorOut);
                factor_shapes.push([c / 2, h, w]);
                c -= c / 2;
            }
        }
        Ok(Self { config, seed, blocks, factor_shapes, final_shape: [c, h, w] })
    }

    pub fn config(&self) -> &FlowConfig {
        &self.config
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn dim(&self) -> usize {
        self.config.input_dim()
    }

    pub fn num_blocks(&self) -> usize {
        self.blocks.len()
    }

    fn check_input(&self, x: ArrayView2<f64>) -> Result<()> {
        if x.ncols() != self.dim() {
            return Err(FlowError::DimensionMismatch { expected: self.dim(), got: x.ncols() });
        }
        if x.nrows() == 0 {
            return Err(FlowError::EmptyBatch);
        }
        Ok(())
    }

    fn to_image(&self, x: ArrayView2<f64>) -> Array4<f64> {
        let [c, h, w] = self.config.input_shape;
        x.as_standard_layout().into_owned().into_shape_with_order((x.nrows(), c, h, w)).expect("checked dims")
    }

    fn flatten(x: Array4<f64>) -> Array2<f64> {
        let n = x.dim().0;
        let d = x.len() / n;
        x.as_standard_layout().into_owned().into_shape_with_order((n, d)).expect("contiguous")
    }

    fn split_code(&self, z: ArrayView2<f64>) -> (Vec<Array4<f64>>, Array4<f64>) {
        let n = z.nrows();
        let mut offset = 0;
        let mut parts = Vec::with_capacity(self.factor_shapes.len());
        for &[c, h, w] in &self.factor_shapes {
            let len = c * h * w;
            let part = z.slice(s![.., offset..offset + len]).as_standard_layout().into_owned();
            parts.push(part.into_shape_with_order((n, c, h, w)).unwrap());
            offset += len;
        }
        let [c, h, w] = self.final_shape;
        let last = z.slice(s![.., offset..]).as_standard_layout().into_owned().into_shape_with_order((n, c, h, w)).unwrap();
        (parts, last)
    }

    fn join_code(parts: Vec<Array4<f64>>, last: Array4<f64>) -> Array2<f64> {
        let mut flat: Vec<Array2<f64>> = parts.into_iter().map(Self::flatten).collect();
        flat.push(Self::flatten(last));
        let views: Vec<_> = flat.iter().map(|a| a.view()).collect();
        concatenate(Axis(1), &views).expect("same batch size")
    }

    /// Maps data to codes; returns `(z, log|det J|)` per example.
    pub fn forward(&self, x: ArrayView2<f64>) -> Result<(Array2<f64>, Array1<f64>)> {
        self.check_input(x)?;
        let mut h = self.to_image(x);
        let mut logdet = Array1::zeros(x.nrows());
        let mut parts = Vec::new();
        for (i, block) in self.blocks.iter().enumerate() {
            h = match block {
                Block::Squeeze => squeeze(h.view()),
                Block::Mix(m) => {
                    let (y, ld) = m.forward(h.view());
                    logdet += ld;
                    y
                }
                Block::Couple(c) => {
                    let (y, ld) = c.forward(h.view());
                    logdet += &ld;
                    y
                }
                Block::FactorOut => factor_out(h, &mut parts),
            };
            ensure_finite(&h, &logdet, i)?;
        }
        Ok((Self::join_code(parts, h), logdet))
    }

    /// Maps codes back to data.
    pub fn inverse(&self, z: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_input(z)?;
        let (mut parts, mut h) = self.split_code(z);
        let empty = Array1::zeros(0);
        for (i, block) in self.blocks.iter().enumerate().rev() {
            h = match block {
                Block::Squeeze => unsqueeze(h.view()),
                Block::Mix(m) => m.inverse(h.view()),
                Block::Couple(c) => c.inverse(h.view()),
                Block::FactorOut => {
                    let part = parts.pop().expect("one part per factor-out");
                    concatenate(Axis(1), &[part.view(), h.view()]).unwrap()
                }
            };
            ensure_finite(&h, &empty, i)?;
        }
        Ok(Self::flatten(h))
    }

    /// Log-density of each row under the flow.
    pub fn log_prob(&self, x: ArrayView2<f64>) -> Result<Array1<f64>> {
        let (z, logdet) = self.forward(x)?;
        Ok(standard_normal_log_density(z.view()) + logdet)
    }

    /// Mean negative log-likelihood per dimension, in nats.
    pub fn nll_loss(&self, x: ArrayView2<f64>) -> Result<f64> {
        let lp = self.log_prob(x)?;
        Ok(-lp.mean().expect("non-empty") / self.dim() as f64)
    }

    pub fn forward_train(&mut self, x: ArrayView2<f64>) -> Result<(Array2<f64>, Array1<f64>, FlowTape)> {
        self.check_input(x)?;
        let mut h = self.to_image(x);
        let mut logdet = Array1::zeros(x.nrows());
        let mut parts = Vec::new();
        let mut caches = Vec::with_capacity(self.blocks.len());
        for (i, block) in self.blocks.iter_mut().enumerate() {
            h = match block {
                Block::Squeeze => {
                    caches.push(BlockCache::Shape);
                    squeeze(h.view())
                }
                Block::Mix(m) => {
                    let (y, ld, cache) = m.forward_train(h.view());
                    caches.push(BlockCache::Mix(cache));
                    logdet += ld;
                    y
                }
                Block::Couple(c) => {
                    let (y, ld, cache) = c.forward_train(h.view());
                    caches.push(BlockCache::Couple(cache));
                    logdet += &ld;
                    y
                }
                Block::FactorOut => {
                    caches.push(BlockCache::Shape);
                    factor_out(h, &mut parts)
                }
            };
            ensure_finite(&h, &logdet, i)?;
        }
        Ok((Self::join_code(parts, h), logdet, FlowTape { caches }))
    }

    /// Accumulates parameter gradients given cotangents for the code and the
    /// per-example log-determinant; returns the gradient w.r.t. the input.
    pub fn backward(&mut self, tape: FlowTape, dz: ArrayView2<f64>, dlogdet: &Array1<f64>) -> Array2<f64> {
        let (mut parts, mut dh) = self.split_code(dz);
        let dlogdet_total = dlogdet.sum();
        for (block, cache) in self.blocks.iter_mut().zip(tape.caches).rev() {
            dh = match (block, cache) {
                (Block::Squeeze, _) => unsqueeze(dh.view()),
                (Block::Mix(m), BlockCache::Mix(c)) => m.backward(c, dh.view(), dlogdet_total),
                (Block::Couple(cp), BlockCache::Couple(c)) => cp.backward(c, dh.view(), dlogdet),
                (Block::FactorOut, _) => {
                    let part = parts.pop().expect("one part per factor-out");
                    concatenate(Axis(1), &[part.view(), dh.view()]).unwrap()
                }
                _ => unreachable!("tape recorded by a different flow"),
            };
        }
        Self::flatten(dh)
    }

    pub fn inverse_train(&mut self, z: ArrayView2<f64>) -> Result<(Array2<f64>, FlowTape)> {
        self.check_input(z)?;
        let (mut parts, mut h) = self.split_code(z);
        let empty = Array1::zeros(0);
        let mut caches = Vec::with_capacity(self.blocks.len());
        for (i, block) in self.blocks.iter_mut().enumerate().rev() {
            h = match block {
                Block::Squeeze => {
                    caches.push(BlockCache::Shape);
                    unsqueeze(h.view())
                }
                Block::Mix(m) => {
                    let (x, cache) = m.inverse_train(h.view());
                    caches.push(BlockCache::Mix(cache));
                    x
                }
                Block::Couple(c) => {
                    let (x, cache) = c.inverse_train(h.view());
                    caches.push(BlockCache::Couple(cache));
                    x
                }
                Block::FactorOut => {
                    caches.push(BlockCache::Shape);
                    let part = parts.pop().expect("one part per factor-out");
                    concatenate(Axis(1), &[part.view(), h.view()]).unwrap()
                }
            };
            ensure_finite(&h, &empty, i)?;
        }
        caches.reverse();
        Ok((Self::flatten(h), FlowTape { caches }))
    }

    /// Backpropagates through [`FlowModel::inverse_train`]; returns the
    /// gradient w.r.t. the code.
    pub fn backward_inverse(&mut self, tape: FlowTape, dx: ArrayView2<f64>) -> Array2<f64> {
        let mut dh = self.to_image(dx);
        let mut parts = Vec::new();
        for (block, cache) in self.blocks.iter_mut().zip(tape.caches) {
            dh = match (block, cache) {
                (Block::Squeeze, _) => squeeze(dh.view()),
                (Block::Mix(m), BlockCache::Mix(c)) => m.backward_inverse(c, dh.view()),
                (Block::Couple(cp), BlockCache::Couple(c)) => cp.backward_inverse(c, dh.view()),
                (Block::FactorOut, _) => factor_out(dh, &mut parts),
                _ => unreachable!("tape recorded by a different flow"),
            };
        }
        Self::join_code(parts, dh)
    }

    /// Parameters and fixed buffers by name.
    pub fn tensors(&self) -> BTreeMap<String, ArrayD<f64>> {
        let mut out = BTreeMap::new();
        self.visit("", &mut |name, p| {
            out.insert(name.to_string(), p.value.clone());
        });
        for (i, block) in self.blocks.iter().enumerate() {
            if let Block::Mix(m) = block {
                for (name, value) in m.buffers() {
                    out.insert(join(&format!("blocks.{i}"), name), value);
                }
            }
        }
        out
    }

    /// Rebuilds a model from a configuration and named tensors.
    pub fn from_tensors(config: FlowConfig, seed: u64, tensors: &BTreeMap<String, ArrayD<f64>>) -> Result<Self> {
        let mut model = Self::new(config, seed)?;
        let mut missing = None;
        model.visit_mut("", &mut |name, p| match tensors.get(name) {
            Some(v) if v.shape() == p.value.shape() => p.value.assign(v),
            _ => missing = missing.take().or(Some(name.to_string())),
        });
        if let Some(name) = missing {
            return Err(FlowError::BadTensor(name));
        }
        for (i, block) in model.blocks.iter_mut().enumerate() {
            if let Block::Mix(m) = block {
                for (name, _) in m.buffers() {
                    let key = join(&format!("blocks.{i}"), name);
                    let value = tensors.get(&key).ok_or_else(|| FlowError::BadTensor(key.clone()))?;
                    if !m.set_buffer(name, value.clone()) {
                        return Err(FlowError::BadTensor(key));
                    }
                }
            }
        }
        Ok(model)
    }
}

impl Parameters for FlowModel {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        for (i, block) in self.blocks.iter().enumerate() {
            let p = join(prefix, &format!("blocks.{i}"));
            match block {
                Block::Mix(m) => m.visit(&p, f),
                Block::Couple(c) => c.visit(&p, f),
                _ => {}
            }
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        for (i, block) in self.blocks.iter_mut().enumerate() {
            let p = join(prefix, &format!("blocks.{i}"));
            match block {
                Block::Mix(m) => m.visit_mut(&p, f),
                Block::Couple(c) => c.visit_mut(&p, f),
                _ => {}
            }
        }
    }
}

fn factor_out(h: Array4<f64>, parts: &mut Vec<Array4<f64>>) -> Array4<f64> {
    let k = h.dim().1 / 2;
    parts.push(h.slice(s![.., ..k, .., ..]).to_owned());
    h.slice(s![.., k.., .., ..]).to_owned()
}

fn ensure_finite(h: &Array4<f64>, logdet: &Array1<f64>, block: usize) -> Result<()> {
    if h.iter().chain(logdet.iter()).all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(FlowError::NumericalInstability { block })
    }
}

/// `log N(z; 0, I)` per row.
pub fn standard_normal_log_density(z: ArrayView2<f64>) -> Array1<f64> {
    let d = z.ncols() as f64;
    z.map_axis(Axis(1), |row| -0.5 * row.dot(&row) - 0.5 * d * (2.0 * PI).ln())
}

/// Per-dimension negative log-likelihood of a batch of codes and its
/// cotangents `(loss, dL/dz, dL/dlogdet)`.
pub fn nll_objective(z: ArrayView2<f64>, logdet: &Array1<f64>) -> (f64, Array2<f64>, Array1<f64>) {
    let (n, d) = z.dim();
    let scale = 1.0 / (n as f64 * d as f64);
    let lp = standard_normal_log_density(z) + logdet;
    let loss = -lp.sum() * scale;
    (loss, z.mapv(|v| v * scale), Array1::from_elem(n, -scale))
}
