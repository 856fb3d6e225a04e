//! A small CPU neural-network toolkit with explicit backward passes.
//!
//! Every layer exposes an evaluation-only `forward(&self, ..)` that is safe to
//! call from several threads on a frozen model, and a training pair
//! `forward_train` / `backward` where the forward pass returns an owned cache
//! that the backward pass consumes. Gradients accumulate into [`Param::grad`]
//! until cleared with [`zero_grad`].
//!
//! All arithmetic is `f64`. Image batches are `[N, C, H, W]`, feature batches
//! are `[N, D]`.

pub mod init;
pub mod layers;
pub mod loss;
pub mod ops;
pub mod optim;

pub use layers::{
    Activation, BatchNorm2d, Conv2d, Dense, Layer, LayerCache, ResidualDense, Sequential,
};
pub use optim::RAdam;

use ndarray::{ArrayD, ArrayView2, ArrayView4, ArrayViewMut2, ArrayViewMut4, Ix2, Ix4};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NnError {
    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("empty batch")]
    EmptyBatch,
}

pub type Result<T> = std::result::Result<T, NnError>;

/// A trainable tensor together with its accumulated gradient.
#[derive(Debug, Clone)]
pub struct Param {
    pub value: ArrayD<f64>,
    pub grad: ArrayD<f64>,
}

impl Param {
    pub fn new(value: ArrayD<f64>) -> Self {
        let grad = ArrayD::zeros(value.raw_dim());
        Self { value, grad }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn view2(&self) -> ArrayView2<'_, f64> {
        self.value.view().into_dimensionality::<Ix2>().expect("rank-2 parameter")
    }

    pub fn view4(&self) -> ArrayView4<'_, f64> {
        self.value.view().into_dimensionality::<Ix4>().expect("rank-4 parameter")
    }

    pub fn grad2_mut(&mut self) -> ArrayViewMut2<'_, f64> {
        self.grad.view_mut().into_dimensionality::<Ix2>().expect("rank-2 parameter")
    }

    pub fn grad4_mut(&mut self) -> ArrayViewMut4<'_, f64> {
        self.grad.view_mut().into_dimensionality::<Ix4>().expect("rank-4 parameter")
    }
}

/// Visits named parameters in a fixed, deterministic order.
///
/// Names are dot-separated paths (`coupling.0.conv.weight`). The mutable and
/// immutable visitors must enumerate parameters in the same order; optimizers
/// rely on the position of each parameter in that order.
pub trait Parameters {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param));
}

pub fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

pub fn zero_grad(model: &mut (impl Parameters + ?Sized)) {
    model.visit_mut("", &mut |_, p| p.zero_grad());
}

pub fn param_count(model: &(impl Parameters + ?Sized)) -> usize {
    let mut n = 0;
    model.visit("", &mut |_, p| n += p.len());
    n
}

/// Squared L2 norm of every accumulated gradient.
pub fn grad_norm_sq(model: &(impl Parameters + ?Sized)) -> f64 {
    let mut acc = 0.0;
    model.visit("", &mut |_, p| acc += p.grad.iter().map(|g| g * g).sum::<f64>());
    acc
}

impl<T: Parameters> Parameters for Vec<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        for (i, item) in self.iter().enumerate() {
            item.visit(&join(prefix, &i.to_string()), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        for (i, item) in self.iter_mut().enumerate() {
            item.visit_mut(&join(prefix, &i.to_string()), f);
        }
    }
}
