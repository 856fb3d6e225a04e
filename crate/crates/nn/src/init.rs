//! Weight initialisers.

use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

/// Glorot/Xavier uniform: `U(-a, a)` with `a = sqrt(6 / (fan_in + fan_out))`.
pub fn xavier_uniform<R: Rng + ?Sized>(
    shape: &[usize],
    fan_in: usize,
    fan_out: usize,
    rng: &mut R,
) -> ArrayD<f64> {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    uniform(shape, bound, rng)
}

/// LeCun normal, the matching initialiser for SELU networks.
pub fn lecun_normal<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> ArrayD<f64> {
    let normal = Normal::new(0.0, (1.0 / fan_in as f64).sqrt()).expect("finite std");
    ArrayD::from_shape_simple_fn(IxDyn(shape), || normal.sample(rng))
}

/// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`, the usual default for dense and
/// convolutional layers.
pub fn fan_in_uniform<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> ArrayD<f64> {
    uniform(shape, 1.0 / (fan_in.max(1) as f64).sqrt(), rng)
}

pub fn uniform<R: Rng + ?Sized>(shape: &[usize], bound: f64, rng: &mut R) -> ArrayD<f64> {
    if bound == 0.0 {
        return ArrayD::zeros(IxDyn(shape));
    }
    let dist = Uniform::new(-bound, bound).expect("valid bounds");
    ArrayD::from_shape_simple_fn(IxDyn(shape), || dist.sample(rng))
}

pub fn zeros(shape: &[usize]) -> ArrayD<f64> {
    ArrayD::zeros(IxDyn(shape))
}

/// How the weights of a freshly built layer are drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Init {
    FanInUniform,
    Xavier,
    LecunNormal,
    Zeros,
}

impl Init {
    pub fn draw<R: Rng + ?Sized>(
        self,
        shape: &[usize],
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> ArrayD<f64> {
        match self {
            Init::FanInUniform => fan_in_uniform(shape, fan_in, rng),
            Init::Xavier => xavier_uniform(shape, fan_in, fan_out, rng),
            Init::LecunNormal => lecun_normal(shape, fan_in, rng),
            Init::Zeros => zeros(shape),
        }
    }
}
