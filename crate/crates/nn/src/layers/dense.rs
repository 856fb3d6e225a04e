use ndarray::{Array2, ArrayView2, Axis, Ix1};
use rand::Rng;

use crate::init::Init;
use crate::{join, Activation, Param, Parameters};

/// Fully connected layer `y = x W + b` with `W: [in, out]`.
#[derive(Debug, Clone)]
pub struct Dense {
    pub weight: Param,
    pub bias: Param,
}

impl Dense {
    pub fn new<R: Rng + ?Sized>(input: usize, output: usize, init: Init, rng: &mut R) -> Self {
        let weight = init.draw(&[input, output], input, output, rng);
        let bias = match init {
            Init::FanInUniform => init.draw(&[output], input, output, rng),
            _ => crate::init::zeros(&[output]),
        };
        Self { weight: Param::new(weight), bias: Param::new(bias) }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.value.shape()[0]
    }

    pub fn output_dim(&self) -> usize {
        self.weight.value.shape()[1]
    }

    pub fn forward(&self, x: ArrayView2<f64>) -> Array2<f64> {
        let b = self.bias.value.view().into_dimensionality::<Ix1>().expect("rank-1 bias");
        x.dot(&self.weight.view2()) + b
    }

    /// Accumulates parameter gradients given the layer input `x`; returns `dx`.
    pub fn backward(&mut self, x: ArrayView2<f64>, dy: ArrayView2<f64>) -> Array2<f64> {
        self.weight.grad2_mut().scaled_add(1.0, &x.t().dot(&dy));
        let db = dy.sum_axis(Axis(0));
        let mut bg = self.bias.grad.view_mut().into_dimensionality::<Ix1>().expect("rank-1 bias");
        bg += &db;
        dy.dot(&self.weight.view2().t())
    }
}

impl Parameters for Dense {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        f(&join(prefix, "weight"), &self.weight);
        f(&join(prefix, "bias"), &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}

/// Fully connected residual block: `x + W2 act(W1 act(x))`.
#[derive(Debug, Clone)]
pub struct ResidualDense {
    pub first: Dense,
    pub second: Dense,
    pub act: Activation,
}

#[derive(Debug, Clone)]
pub struct ResidualCache {
    x: Array2<f64>,
    a0: Array2<f64>,
    h1: Array2<f64>,
    a1: Array2<f64>,
}

impl ResidualDense {
    pub fn new<R: Rng + ?Sized>(width: usize, act: Activation, init: Init, rng: &mut R) -> Self {
        Self {
            first: Dense::new(width, width, init, rng),
            second: Dense::new(width, width, init, rng),
            act,
        }
    }

    pub fn forward(&self, x: ArrayView2<f64>) -> Array2<f64> {
        let a0 = self.act.apply(&x.to_owned().into_dyn());
        let h1 = self.first.forward(a0.view().into_dimensionality().expect("rank 2"));
        let a1 = self.act.apply(&h1.into_dyn());
        &x + &self.second.forward(a1.view().into_dimensionality().expect("rank 2"))
    }

    pub fn forward_train(&self, x: ArrayView2<f64>) -> (Array2<f64>, ResidualCache) {
        let a0 = self.act.apply(&x.to_owned().into_dyn()).into_dimensionality().expect("rank 2");
        let h1 = self.first.forward(a0.view());
        let a1 = self.act.apply(&h1.clone().into_dyn()).into_dimensionality().expect("rank 2");
        let y = &x + &self.second.forward(a1.view());
        (y, ResidualCache { x: x.to_owned(), a0, h1, a1 })
    }

    pub fn backward(&mut self, cache: ResidualCache, dy: ArrayView2<f64>) -> Array2<f64> {
        let da1 = self.second.backward(cache.a1.view(), dy);
        let dh1 = self.act.backward(&cache.h1.into_dyn(), &cache.a1.into_dyn(), &da1.into_dyn());
        let da0 = self.first.backward(
            cache.a0.view(),
            dh1.view().into_dimensionality().expect("rank 2"),
        );
        let dx = self.act.backward(&cache.x.into_dyn(), &cache.a0.into_dyn(), &da0.into_dyn());
        &dy + &dx.into_dimensionality::<ndarray::Ix2>().expect("rank 2")
    }
}

impl Parameters for ResidualDense {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        self.first.visit(&join(prefix, "first"), f);
        self.second.visit(&join(prefix, "second"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.first.visit_mut(&join(prefix, "first"), f);
        self.second.visit_mut(&join(prefix, "second"), f);
    }
}
